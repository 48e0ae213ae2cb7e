"""Evaluation toolkit: IoU, proxy A-distance, boundary F1, feature export, baselines."""

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import LinearSVC

from . import losses, toy_domains
from .trainer import (RngStreams, TrainConfig, _append_metrics, _batch_tensors,
                      _draw_ids, _set_requires_grad, generate_pseudo_labels,
                      load_checkpoint, poly_lr, save_checkpoint, train_stage1,
                      train_stage3)

log = logging.getLogger(__name__)

SEM_LAYER = "semantic_bottleneck"
EDGE_LAYER = "edge_last"
FEATURE_LAYERS = (SEM_LAYER, EDGE_LAYER)


class ConfusionMatrix:
    """C x C pixel counts, rows ground truth, cols prediction."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt, pred) -> "ConfusionMatrix":
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"gt has {gt.size} pixels, prediction has {pred.size}")
        c = self.num_classes
        for name, arr in (("gt", gt), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ValueError(f"{name} labels fall outside [0, {c})")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def compute_iou(cm: ConfusionMatrix) -> dict:
    """Per-class TP/(TP+FP+FN); classes absent from both sides stay out of the mean."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    present = union > 0
    if not present.any():
        raise ValueError("confusion matrix is empty, nothing to score")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = tp[present] / union[present]
    return {"per_class": per_class.tolist(), "miou": float(per_class[present].mean())}


@dataclass
class ADistanceReport:
    eps: float
    d_a: float
    tag: str
    n_src: int
    n_tgt: int

    def to_dict(self) -> dict:
        return {"eps": self.eps, "d_a": self.d_a, "tag": self.tag,
                "n_src": self.n_src, "n_tgt": self.n_tgt}


def a_distance(src_feats, tgt_feats, tag: str = "semantic", seed: int = 0) -> ADistanceReport:
    """d_A = 2(1 - 2 eps), eps the held-out error of a linear domain classifier.

    Single 50/50 split per domain with a fixed seed; LinearSVC with C=1. Identical
    feature sets are fine: the classifier lands at chance and d_A comes out ~0.
    """
    src = np.asarray(src_feats, dtype=np.float64)
    tgt = np.asarray(tgt_feats, dtype=np.float64)
    for name, arr in (("source", src), ("target", tgt)):
        if arr.ndim != 2:
            raise ValueError(f"{name} features must be (n, dim), got shape {arr.shape}")
        if len(arr) < 20:
            raise ValueError(f"need at least 20 {name} vectors, got {len(arr)}")
    if src.shape[1] != tgt.shape[1]:
        raise ValueError(f"feature dims differ: {src.shape[1]} vs {tgt.shape[1]}")

    rng = np.random.default_rng(seed)

    def halves(arr):
        order = rng.permutation(len(arr))
        cut = len(arr) // 2
        return arr[order[:cut]], arr[order[cut:]]

    s_tr, s_te = halves(src)
    t_tr, t_te = halves(tgt)
    x_tr = np.concatenate([s_tr, t_tr])
    y_tr = np.concatenate([np.zeros(len(s_tr)), np.ones(len(t_tr))])
    x_te = np.concatenate([s_te, t_te])
    y_te = np.concatenate([np.zeros(len(s_te)), np.ones(len(t_te))])
    clf = LinearSVC(C=1.0, random_state=0, max_iter=20000)
    with warnings.catch_warnings():
        # duplicated rows with conflicting labels stall liblinear; chance-level
        # weights are exactly the answer we want there
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(x_tr, y_tr)
    eps = float((clf.predict(x_te) != y_te).mean())
    return ADistanceReport(eps=eps, d_a=2.0 * (1.0 - 2.0 * eps), tag=tag,
                           n_src=len(src), n_tgt=len(tgt))


def boundary_f1(pred, gt, tol_px: int = 1, threshold: float = 0.5) -> dict:
    """Match thresholded boundary pixels within tol_px via distance transforms."""
    if tol_px < 0:
        raise ValueError(f"tol_px must be >= 0, got {tol_px}")
    if isinstance(pred, torch.Tensor):
        pred = pred.detach().cpu().numpy()
    if isinstance(gt, torch.Tensor):
        gt = gt.detach().cpu().numpy()
    pred = np.asarray(pred).squeeze()
    gt = np.asarray(gt).squeeze()
    if pred.ndim != 2 or pred.shape != gt.shape:
        raise ValueError(f"maps must share a 2-d shape, got {pred.shape} vs {gt.shape}")
    p = pred >= threshold
    g = gt >= 0.5
    if not p.any() and not g.any():
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0}

    def frac_matched(a, b):
        if not a.any() or not b.any():
            return 0.0
        dist = distance_transform_edt(~b)
        return float((dist[a] <= tol_px + 1e-9).mean())

    precision = frac_matched(p, g)
    recall = frac_matched(g, p)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1}


def _pooled(model, imgs, layer: str):
    out = model(imgs, use_edge=True)
    if layer == SEM_LAYER:
        feat = out["sem"]["bottleneck"]
    elif layer == EDGE_LAYER:
        feat = out["edge_feat"]
    else:
        raise ValueError(f"unknown feature layer {layer!r}, expected one of {FEATURE_LAYERS}")
    return feat.mean(dim=(2, 3))


def collect_domain_features(model, manifest: toy_domains.DatasetManifest,
                            layer: str, n: int) -> dict:
    """Pool layer activations for the first n images (by id) of each domain.

    Images go through one at a time so the vectors do not depend on batch
    composition. Returns {"source": (ids, (n, dim) array), "target": ...}.
    """
    model.eval()
    out = {}
    c = manifest.spec.num_classes
    with torch.no_grad():
        for domain, split in (("source", "source-train"), ("target", "target-train")):
            ids = sorted(manifest.split(split).ids)
            if n > len(ids):
                raise ValueError(f"asked for {n} {domain} images, split has {len(ids)}")
            ids = ids[:n]
            vecs = []
            for sid in ids:
                sample = toy_domains.load_batch(manifest, split, [sid])
                imgs = _batch_tensors(sample, c, 1)[0]
                vecs.append(_pooled(model, imgs, layer)[0].numpy())
            out[domain] = (ids, np.stack(vecs).astype(np.float64))
    return out


def export_features(checkpoint_path, manifest: toy_domains.DatasetManifest,
                    layer: str, n: int, out_path) -> Path:
    """Write pooled per-image feature vectors of both domains to a TSV file."""
    loaded = load_checkpoint(checkpoint_path)
    feats = collect_domain_features(loaded.model, manifest, layer, n)
    dim = feats["source"][1].shape[1]
    lines = ["\t".join(["domain", "id"] + [f"f{i}" for i in range(dim)])]
    for domain in ("source", "target"):
        ids, vecs = feats[domain]
        for sid, vec in zip(ids, vecs):
            lines.append("\t".join([domain, sid] + [f"{v:.8e}" for v in vec]))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def evaluate_model(model, cfg: TrainConfig, manifest: toy_domains.DatasetManifest,
                   split: str = "target-eval", chunk: int = 8) -> dict:
    """mIoU and boundary F1 over a labeled split."""
    model.eval()
    ids = sorted(manifest.split(split).ids)
    c = manifest.spec.num_classes
    cm = ConfusionMatrix(c)
    bnd_scores = []
    with torch.no_grad():
        for i in range(0, len(ids), chunk):
            batch = toy_domains.load_batch(manifest, split, ids[i:i + chunk])
            imgs, labels, _, bnd_gt = _batch_tensors(batch, c, cfg.boundary_thickness)
            out = model(imgs, use_edge=cfg.use_edge)
            pred = out["logits"].argmax(dim=1)
            for b in range(len(batch)):
                cm.update(labels[b].numpy(), pred[b].numpy())
                if out["boundary"] is not None:
                    bnd_scores.append(boundary_f1(out["boundary"][b, 0], bnd_gt[b, 0]))
    iou = compute_iou(cm)
    report = {"split": split, "num_images": len(ids),
              "per_class_iou": iou["per_class"], "miou": iou["miou"]}
    if bnd_scores:
        report["boundary_f1"] = {
            k: float(np.mean([s[k] for s in bnd_scores]))
            for k in ("precision", "recall", "f1")}
    return report


def evaluate_checkpoint(checkpoint_path, manifest: toy_domains.DatasetManifest,
                        split: str = "target-eval", chunk: int = 8) -> dict:
    loaded = load_checkpoint(checkpoint_path)
    report = evaluate_model(loaded.model, loaded.config, manifest, split, chunk)
    report["checkpoint_id"] = loaded.checkpoint_id
    return report


def evaluation_report(checkpoint_path, manifest: toy_domains.DatasetManifest,
                      split: str = "target-eval", n_feats: int = 50) -> dict:
    """Full report: IoU table, boundary F1, and A-distance on both feature layers."""
    loaded = load_checkpoint(checkpoint_path)
    report = evaluate_model(loaded.model, loaded.config, manifest, split)
    report["checkpoint_id"] = loaded.checkpoint_id
    dists = {}
    for tag, layer in (("semantic", SEM_LAYER), ("edge", EDGE_LAYER)):
        feats = collect_domain_features(loaded.model, manifest, layer, n_feats)
        dists[tag] = a_distance(feats["source"][1], feats["target"][1], tag=tag).to_dict()
    report["a_distance"] = dists
    return report


def _variant(cfg: TrainConfig, **overrides) -> TrainConfig:
    d = cfg.to_dict()
    for key, value in overrides.items():
        if key == "alpha":
            d["weights"]["alpha"] = value
        elif key in d:
            d[key] = value
        else:
            raise KeyError(key)
    return TrainConfig.from_dict(d)


def source_only_config(full: TrainConfig) -> TrainConfig:
    """No target-side terms at all; the networks see only source supervision."""
    return _variant(full, use_sem_adv=False, use_edge_con=False, use_edge_adv=False)


def no_edge_config(full: TrainConfig) -> TrainConfig:
    """Semantic stream plus adversarial alignment, edge stream disabled."""
    return _variant(full, use_edge=False, use_edge_con=False, use_edge_adv=False)


def ablation_arms(full: TrainConfig):
    """Cumulative arm configs; each row adds one term on top of the previous.

    Returns [(name, config, run_stage3), ...]. Every arm differs from the full
    config only in the toggled loss terms.
    """
    full.validate()
    return [
        ("baseline", _variant(full, alpha=0.0, use_edge=False,
                              use_edge_con=False, use_edge_adv=False), False),
        ("+erw", _variant(full, use_edge=False,
                          use_edge_con=False, use_edge_adv=False), False),
        ("+edge_con", _variant(full, use_edge_adv=False), False),
        ("+edge_adv", _variant(full), False),
        ("+uasl", _variant(full), True),
    ]


def run_arm(name: str, cfg: TrainConfig, run_stage3: bool,
            manifest: toy_domains.DatasetManifest, out_root) -> dict:
    """Train one arm end to end and score it on target-eval."""
    arm_dir = Path(out_root) / name.replace("+", "plus_")
    final = train_stage1(cfg, manifest, arm_dir / "stage1")
    ckpt = final
    if run_stage3:
        bundle = generate_pseudo_labels(final, manifest, arm_dir / "pseudo")
        ckpt = train_stage3(final, bundle, cfg, manifest, arm_dir / "stage3")
    report = evaluate_checkpoint(ckpt, manifest)
    log.info("arm %s: mIoU %.4f", name, report["miou"])
    return {"name": name, "checkpoint": str(ckpt), "miou": report["miou"],
            "per_class_iou": report["per_class_iou"]}


def sl_threshold_baseline(checkpoint_path, cfg: TrainConfig,
                          manifest: toy_domains.DatasetManifest, out_dir,
                          threshold: float) -> Path:
    """Standard thresholded self-training, the comparison arm for UASL.

    Pseudo-labels come from the frozen checkpoint and only pixels whose max
    class probability exceeds the threshold contribute, with unweighted CE.
    Same schedule and freezes as the uncertainty-adaptive stage.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    cfg.validate()
    loaded = load_checkpoint(checkpoint_path)
    model = loaded.model
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = RngStreams(cfg.seed)
    c = manifest.spec.num_classes

    # frozen-teacher sweep: labels and confidence masks fixed up front
    tgt_ids = sorted(manifest.split("target-train").ids)
    teacher = {}
    model.eval()
    with torch.no_grad():
        for sid in tgt_ids:
            sample = toy_domains.load_batch(manifest, "target-train", [sid])
            imgs = _batch_tensors(sample, c, cfg.boundary_thickness)[0]
            p = losses.softmax_prob(model(imgs, use_edge=cfg.use_edge)["logits"])[0]
            conf, lab = p.max(dim=0)
            teacher[sid] = (lab, conf > threshold)
    kept = sum(int(m.sum()) for _, m in teacher.values())
    total = sum(m.numel() for _, m in teacher.values())
    if kept == 0:
        raise RuntimeError(
            f"threshold {threshold} keeps zero of {total} target pixels; "
            "no self-training signal")
    log.info("threshold %.3f keeps %d/%d target pixels", threshold, kept, total)

    model.train()
    _set_requires_grad(model.edge, False)
    _set_requires_grad(model.d_sem, False)
    _set_requires_grad(model.d_eg, False)
    opt = torch.optim.SGD(model.semantic.parameters(), lr=cfg.gen_lr,
                          momentum=cfg.gen_momentum, weight_decay=cfg.gen_weight_decay)
    src_ids = manifest.split("source-train").ids
    metrics_path = out_dir / "metrics.jsonl"

    for it in range(cfg.iters_stage3):
        lr = poly_lr(cfg.gen_lr, it, cfg.iters_stage3, cfg.poly_power)
        for group in opt.param_groups:
            group["lr"] = lr
        batch_ids = _draw_ids(streams.tgt3, tgt_ids, cfg.batch_size)
        samples = toy_domains.load_batch(manifest, "target-train", batch_ids)
        imgs = _batch_tensors(samples, c, cfg.boundary_thickness)[0]
        labs = torch.stack([teacher[sid][0] for sid in batch_ids])
        mask = torch.stack([teacher[sid][1] for sid in batch_ids])

        opt.zero_grad(set_to_none=True)
        p = losses.softmax_prob(model(imgs, use_edge=cfg.use_edge)["logits"])
        onehot = torch.nn.functional.one_hot(labs, c).permute(0, 3, 1, 2).float()
        ce = -(onehot * losses._safe_log(p)).sum(dim=1)
        sl = ce[mask].mean() if mask.any() else p.new_zeros(())
        comps = {"sl": sl}
        if cfg.stage3_keep_source:
            src_batch = _batch_tensors(
                toy_domains.load_batch(manifest, "source-train",
                                       _draw_ids(streams.src3, src_ids, cfg.batch_size)),
                c, cfg.boundary_thickness)
            p_s = losses.softmax_prob(model(src_batch[0], use_edge=cfg.use_edge)["logits"])
            comps["sem_seg"] = losses.cross_entropy_seg(p_s, src_batch[2])
            comps["lovasz"] = losses.lovasz_softmax(p_s, src_batch[1])
        loss = sum(comps.values())
        if not torch.isfinite(loss):
            raise RuntimeError(f"self-training baseline diverged at iteration {it}")
        if loss.item() != 0.0:
            loss.backward()
            opt.step()

        done = it + 1
        if done % cfg.log_every == 0 or done == cfg.iters_stage3:
            record = {"stage": 3, "iter": done, "lr_gen": lr, "threshold": threshold,
                      "kept_px": kept, "total_px": total}
            record.update({f"loss_{k}": v.item() for k, v in comps.items()})
            _append_metrics(metrics_path, record)

    _set_requires_grad(model.edge, True)
    _set_requires_grad(model.d_sem, True)
    _set_requires_grad(model.d_eg, True)
    return save_checkpoint(out_dir, model, cfg, cfg.iters_stage3, stage=3)
