"""Three-stage training: joint adversarial alignment, pseudo-label generation,
uncertainty-weighted fine-tuning.

Every iteration of stage 1 runs a generator phase (discriminators frozen,
source supervision + target-side fooling/consistency terms, one step on the
two generators) followed by a discriminator phase on detached generator
outputs. All randomness flows from the run seed through separate streams for
source batches, target batches, Gumbel noise, and weight init, so disabling a
loss term cannot shift the batch sequence of the surviving ones.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses, toy_domains
from .losses import LossWeights, PseudoLabelBundle
from .nets import NetConfig, SedaModel, build_nets

log = logging.getLogger(__name__)


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    iters_stage1: int = 2000
    iters_stage3: int = 1000
    batch_size: int = 1
    gen_lr: float = 2.5e-4
    gen_momentum: float = 0.9
    gen_weight_decay: float = 5e-4
    disc_lr: float = 1e-4
    disc_betas: tuple = (0.9, 0.99)
    poly_power: float = 0.9
    grad_clip: float = 0.0
    edge_warmup: int = 0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500
    boundary_thickness: int = 1
    use_edge: bool = True
    use_sem_adv: bool = True
    use_edge_adv: bool = True
    use_edge_con: bool = True
    stage3_keep_source: bool = True

    def validate(self) -> None:
        self.net.validate()
        self.weights.validate()
        if self.iters_stage1 <= 0 or self.iters_stage3 <= 0:
            raise ValueError("iteration counts must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if min(self.gen_lr, self.disc_lr) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if self.edge_warmup < 0:
            raise ValueError("edge_warmup must be >= 0")
        if self.boundary_thickness < 1:
            raise ValueError("boundary_thickness must be >= 1")
        if self.log_every <= 0:
            raise ValueError("log_every must be > 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in vars(self)}
        d["net"] = self.net.to_dict()
        d["weights"] = self.weights.to_dict()
        d["disc_betas"] = list(self.disc_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        kw["net"] = NetConfig.from_dict(kw.get("net", {}))
        kw["weights"] = LossWeights.from_dict(kw.get("weights", {}))
        if "disc_betas" in kw:
            kw["disc_betas"] = tuple(kw["disc_betas"])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class RngStreams:
    """Independent deterministic streams per randomness consumer."""

    KEYS = ("src1", "tgt1", "src3", "tgt3")

    def __init__(self, seed: int):
        kids = np.random.SeedSequence(seed).spawn(6)
        self.src1 = np.random.default_rng(kids[0])
        self.tgt1 = np.random.default_rng(kids[1])
        self.src3 = np.random.default_rng(kids[2])
        self.tgt3 = np.random.default_rng(kids[3])
        self.torch_seed = int(kids[4].generate_state(1)[0])
        self.gumbel = torch.Generator().manual_seed(int(kids[5].generate_state(1)[0]))

    def numpy_state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in self.KEYS}

    def restore_numpy(self, states: dict) -> None:
        for k in self.KEYS:
            getattr(self, k).bit_generator.state = states[k]


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _draw_ids(rng: np.random.Generator, ids: list, batch_size: int) -> list:
    picks = rng.integers(0, len(ids), size=batch_size)
    return [ids[int(i)] for i in picks]


def _batch_tensors(samples, num_classes: int, thickness: int):
    imgs = torch.from_numpy(np.stack([s.image for s in samples]))
    imgs = imgs.permute(0, 3, 1, 2).contiguous()
    labels = onehot = bgt = None
    if samples[0].label is not None:
        lab = np.stack([s.label for s in samples])
        labels = torch.from_numpy(lab)
        onehot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).float()
        bnd = np.stack(
            [toy_domains.labels_to_boundary(s.label, thickness) for s in samples])
        bgt = torch.from_numpy(bnd).float().unsqueeze(1)
    return imgs, labels, onehot, bgt


def _needs_target(cfg: TrainConfig) -> bool:
    return cfg.use_sem_adv or (cfg.use_edge and (cfg.use_edge_adv or cfg.use_edge_con))


def generator_phase(model: SedaModel, opt_g, src_batch, tgt_imgs, cfg: TrainConfig, gumbel,
                    edge_live: bool = True):
    """Source supervision plus target fooling/consistency; one step on G_sem and G_eg.

    Returns (loss components as floats, detached tensors for the discriminator
    phase). Discriminators are frozen for the duration of the step. With
    edge_live False the edge-stream target terms (consistency, edge
    adversarial) sit out; supervised edge training and the semantic adversary
    are unaffected.
    """
    w = cfg.weights
    _set_requires_grad(model.d_sem, False)
    _set_requires_grad(model.d_eg, False)
    opt_g.zero_grad(set_to_none=True)

    imgs, labels, onehot, bgt = src_batch
    out_s = model(imgs, use_edge=cfg.use_edge)
    p_s = losses.softmax_prob(out_s["logits"])
    comps = {
        "sem_seg": losses.cross_entropy_seg(p_s, onehot),
        "lovasz": losses.lovasz_softmax(p_s, labels),
    }
    if cfg.use_edge:
        comps["eg_seg"] = losses.edge_bce(out_s["boundary"], bgt)

    cache = {
        "si_src": losses.self_information(p_s.detach()),
        "edge_src": out_s["edge_feat"].detach() if cfg.use_edge else None,
        "si_tgt": None, "edge_tgt": None, "eps_t": None, "gnorm": None,
    }
    if tgt_imgs is not None:
        out_t = model(tgt_imgs, use_edge=cfg.use_edge)
        p_t = losses.softmax_prob(out_t["logits"])
        em = losses.entropy(p_t)
        cache["si_tgt"] = losses.self_information(p_t.detach())
        if cfg.use_edge and edge_live:
            cache["edge_tgt"] = out_t["edge_feat"].detach()
        cache["eps_t"] = em.image_mean.detach()
        if cfg.use_sem_adv and w.lambda1 != 0:
            scores = model.d_sem(losses.self_information(p_t))
            comps["sem_adv"] = losses.adv_sem(None, scores, em.image_mean, w.alpha, "gen")
        if cfg.use_edge and edge_live and cfg.use_edge_adv and w.lambda3 != 0:
            comps["eg_adv"] = losses.adv_edge(None, model.d_eg(out_t["edge_feat"]), "gen")
        if cfg.use_edge and edge_live and cfg.use_edge_con:
            p_bnd = losses.pred_to_boundary(out_t["logits"], w.tau, w.sigma, gumbel)
            comps["eg_con"] = losses.edge_consistency(p_bnd, out_t["boundary"], w.theta, w.nplus)

    loss = losses.total_loss(comps, w)
    if loss.item() != 0.0:
        loss.backward()
        # the entropy weight grows quadratically with target entropy, so on bad
        # seeds the adversarial gradient can snowball; cap the update instead of
        # touching the loss itself
        cache["gnorm"] = float(torch.nn.utils.clip_grad_norm_(
            model.generator_parameters(),
            cfg.grad_clip if cfg.grad_clip > 0 else float("inf")))
        opt_g.step()
    _set_requires_grad(model.d_sem, True)
    _set_requires_grad(model.d_eg, True)
    return {k: v.item() for k, v in comps.items()}, cache


def discriminator_phase(model: SedaModel, opt_ds, opt_de, cache, cfg: TrainConfig):
    """One step each on D_sem and D_eg against detached generator outputs."""
    out = {}
    if cfg.use_sem_adv and cache["si_tgt"] is not None:
        opt_ds.zero_grad(set_to_none=True)
        d_loss = losses.adv_sem(model.d_sem(cache["si_src"]), model.d_sem(cache["si_tgt"]),
                                cache["eps_t"], cfg.weights.alpha, "disc")
        if not torch.isfinite(d_loss):
            raise FloatingPointError("d_sem loss is not finite")
        d_loss.backward()
        opt_ds.step()
        out["d_sem"] = d_loss.item()
    if cfg.use_edge and cfg.use_edge_adv and cache["edge_tgt"] is not None:
        opt_de.zero_grad(set_to_none=True)
        d_loss = losses.adv_edge(model.d_eg(cache["edge_src"]), model.d_eg(cache["edge_tgt"]),
                                 "disc")
        if not torch.isfinite(d_loss):
            raise FloatingPointError("d_eg loss is not finite")
        d_loss.backward()
        opt_de.step()
        out["d_eg"] = d_loss.item()
    return out


def checkpoint_id(cfg: TrainConfig, stage: int, iteration: int) -> str:
    return f"{cfg.hash()}-s{stage}-i{iteration:07d}"


def save_checkpoint(out_dir, model: SedaModel, cfg: TrainConfig, iteration: int, stage: int,
                    optims: dict | None = None, streams: RngStreams | None = None) -> Path:
    ckpt = Path(out_dir) / f"ckpt_s{stage}_{iteration:07d}"
    ckpt.mkdir(parents=True, exist_ok=True)
    torch.save(model.semantic.state_dict(), ckpt / "g_sem.pt")
    torch.save(model.edge.state_dict(), ckpt / "g_eg.pt")
    torch.save(model.d_sem.state_dict(), ckpt / "d_sem.pt")
    torch.save(model.d_eg.state_dict(), ckpt / "d_eg.pt")
    blob = {}
    if optims is not None:
        blob.update({name: opt.state_dict() for name, opt in optims.items()})
    if streams is not None:
        blob["gumbel"] = streams.gumbel.get_state()
    torch.save(blob, ckpt / "optim.pt")
    manifest = {
        "iteration": iteration,
        "stage": stage,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "checkpoint_id": checkpoint_id(cfg, stage, iteration),
        "rng": streams.numpy_state() if streams is not None else None,
    }
    (ckpt / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return ckpt


@dataclass
class LoadedCheckpoint:
    model: SedaModel
    config: TrainConfig
    iteration: int
    stage: int
    checkpoint_id: str
    optim_state: dict
    rng: dict | None


def load_checkpoint(path) -> LoadedCheckpoint:
    ckpt = Path(path)
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest under {ckpt}")
    manifest = json.loads((ckpt / "manifest.json").read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    model = build_nets(cfg.net)
    model.semantic.load_state_dict(torch.load(ckpt / "g_sem.pt", weights_only=True))
    model.edge.load_state_dict(torch.load(ckpt / "g_eg.pt", weights_only=True))
    model.d_sem.load_state_dict(torch.load(ckpt / "d_sem.pt", weights_only=True))
    model.d_eg.load_state_dict(torch.load(ckpt / "d_eg.pt", weights_only=True))
    optim_state = torch.load(ckpt / "optim.pt", weights_only=False)
    return LoadedCheckpoint(
        model=model, config=cfg, iteration=manifest["iteration"], stage=manifest["stage"],
        checkpoint_id=manifest["checkpoint_id"], optim_state=optim_state,
        rng=manifest.get("rng"))


def _append_metrics(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _build_optimizers(model: SedaModel, cfg: TrainConfig) -> dict:
    return {
        "gen": torch.optim.SGD(model.generator_parameters(), lr=cfg.gen_lr,
                               momentum=cfg.gen_momentum, weight_decay=cfg.gen_weight_decay),
        "d_sem": torch.optim.Adam(model.d_sem.parameters(), lr=cfg.disc_lr,
                                  betas=cfg.disc_betas),
        "d_eg": torch.optim.Adam(model.d_eg.parameters(), lr=cfg.disc_lr,
                                 betas=cfg.disc_betas),
    }


def train_stage1(cfg: TrainConfig, manifest: toy_domains.DatasetManifest, out_dir,
                 resume=None) -> Path:
    """Joint adversarial training; returns the final checkpoint directory."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = RngStreams(cfg.seed)
    start = 0
    last_good = None

    if resume is None:
        torch.manual_seed(streams.torch_seed)
        model = build_nets(cfg.net)
        optims = _build_optimizers(model, cfg)
    else:
        loaded = load_checkpoint(resume)
        if loaded.config.hash() != cfg.hash():
            raise ValueError("resume checkpoint was trained with a different config")
        if loaded.stage != 1:
            raise ValueError(f"cannot resume stage 1 from a stage-{loaded.stage} checkpoint")
        model = loaded.model
        start = loaded.iteration
        optims = _build_optimizers(model, cfg)
        for name, opt in optims.items():
            opt.load_state_dict(loaded.optim_state[name])
        streams.restore_numpy(loaded.rng)
        streams.gumbel.set_state(loaded.optim_state["gumbel"])
        last_good = Path(resume)

    src_ids = manifest.split("source-train").ids
    tgt_ids = manifest.split("target-train").ids
    needs_tgt = _needs_target(cfg)
    metrics_path = out_dir / "metrics.jsonl"
    if resume is None and metrics_path.exists():
        metrics_path.unlink()

    c = manifest.spec.num_classes
    for it in range(start, cfg.iters_stage1):
        lr_g = poly_lr(cfg.gen_lr, it, cfg.iters_stage1, cfg.poly_power)
        lr_d = poly_lr(cfg.disc_lr, it, cfg.iters_stage1, cfg.poly_power)
        for group in optims["gen"].param_groups:
            group["lr"] = lr_g
        for name in ("d_sem", "d_eg"):
            for group in optims[name].param_groups:
                group["lr"] = lr_d

        src_batch = _batch_tensors(
            toy_domains.load_batch(manifest, "source-train",
                                   _draw_ids(streams.src1, src_ids, cfg.batch_size)),
            c, cfg.boundary_thickness)
        tgt_imgs = None
        if needs_tgt:
            tgt_samples = toy_domains.load_batch(
                manifest, "target-train", _draw_ids(streams.tgt1, tgt_ids, cfg.batch_size))
            tgt_imgs = _batch_tensors(tgt_samples, c, cfg.boundary_thickness)[0]

        try:
            # the edge-stream target terms sit out early training: consistency
            # against a half-formed edge stream corrupts target predictions,
            # and the entropy-reweighted adversary then amplifies the damage
            comps, cache = generator_phase(model, optims["gen"], src_batch, tgt_imgs,
                                           cfg, streams.gumbel,
                                           edge_live=it >= cfg.edge_warmup)
            d_out = discriminator_phase(model, optims["d_sem"], optims["d_eg"], cache, cfg)
        except FloatingPointError as e:
            raise RuntimeError(
                f"stage 1 aborted at iteration {it}: {e}; "
                f"last good checkpoint: {last_good}") from e

        done = it + 1
        if done % cfg.log_every == 0 or done == cfg.iters_stage1:
            record = {"stage": 1, "iter": done, "lr_gen": lr_g, "lr_disc": lr_d}
            record.update({f"loss_{k}": v for k, v in comps.items()})
            record.update({f"loss_{k}": v for k, v in d_out.items()})
            if cache["eps_t"] is not None:
                record["eps_mean"] = cache["eps_t"].mean().item()
            if cache["gnorm"] is not None:
                record["gnorm_gen"] = cache["gnorm"]
            _append_metrics(metrics_path, record)
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.iters_stage1:
            last_good = save_checkpoint(out_dir, model, cfg, done, 1, optims, streams)

    return save_checkpoint(out_dir, model, cfg, cfg.iters_stage1, 1, optims, streams)


def generate_pseudo_labels(checkpoint_path, manifest: toy_domains.DatasetManifest,
                           out_dir=None, chunk: int = 8) -> PseudoLabelBundle:
    """Argmax labels and entropy maps for every target-train image, no thresholding."""
    loaded = load_checkpoint(checkpoint_path)
    cfg = loaded.config
    ids = list(manifest.split("target-train").ids)
    bundle = PseudoLabelBundle(num_classes=manifest.spec.num_classes,
                               checkpoint_id=loaded.checkpoint_id,
                               spec_hash=manifest.spec_hash)
    for lo in range(0, len(ids), chunk):
        batch_ids = ids[lo:lo + chunk]
        samples = toy_domains.load_batch(manifest, "target-train", batch_ids)
        imgs = _batch_tensors(samples, manifest.spec.num_classes, 1)[0]
        with torch.no_grad():
            out = loaded.model(imgs, use_edge=cfg.use_edge)
            p = losses.softmax_prob(out["logits"])
            em = losses.entropy(p)
            labels = p.argmax(dim=1)
        for i, sid in enumerate(batch_ids):
            bundle.add(sid, labels[i].numpy(), np.clip(em.map[i].numpy(), 0.0, 1.0))
    if out_dir is not None:
        bundle.save(out_dir)
    return bundle


def train_stage3(checkpoint_path, bundle: PseudoLabelBundle, cfg: TrainConfig,
                 manifest: toy_domains.DatasetManifest, out_dir) -> Path:
    """Fine-tune G_sem on pseudo-labels; G_eg and both discriminators stay frozen."""
    cfg.validate()
    loaded = load_checkpoint(checkpoint_path)
    if bundle.checkpoint_id != loaded.checkpoint_id:
        raise ValueError(
            f"stale pseudo-labels: bundle from {bundle.checkpoint_id!r}, "
            f"checkpoint is {loaded.checkpoint_id!r}")
    model = loaded.model
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = RngStreams(cfg.seed)

    _set_requires_grad(model.edge, False)
    _set_requires_grad(model.d_sem, False)
    _set_requires_grad(model.d_eg, False)
    opt = torch.optim.SGD(model.semantic.parameters(), lr=cfg.gen_lr,
                          momentum=cfg.gen_momentum, weight_decay=cfg.gen_weight_decay)

    src_ids = manifest.split("source-train").ids
    tgt_ids = list(bundle.ids)
    missing = set(tgt_ids) - set(manifest.split("target-train").ids)
    if missing:
        raise ValueError(f"bundle ids not in target-train split: {sorted(missing)[:5]}")
    metrics_path = out_dir / "metrics.jsonl"
    c = manifest.spec.num_classes

    for it in range(cfg.iters_stage3):
        lr = poly_lr(cfg.gen_lr, it, cfg.iters_stage3, cfg.poly_power)
        for group in opt.param_groups:
            group["lr"] = lr
        batch_ids = _draw_ids(streams.tgt3, tgt_ids, cfg.batch_size)
        samples = toy_domains.load_batch(manifest, "target-train", batch_ids)
        imgs = _batch_tensors(samples, c, cfg.boundary_thickness)[0]
        y, e = bundle.tensors_for(batch_ids)

        opt.zero_grad(set_to_none=True)
        out = model(imgs, use_edge=cfg.use_edge)
        p = losses.softmax_prob(out["logits"])
        comps = {"uasl": losses.uasl(p, y, e)}
        if cfg.stage3_keep_source:
            src_batch = _batch_tensors(
                toy_domains.load_batch(manifest, "source-train",
                                       _draw_ids(streams.src3, src_ids, cfg.batch_size)),
                c, cfg.boundary_thickness)
            p_s = losses.softmax_prob(model(src_batch[0], use_edge=cfg.use_edge)["logits"])
            comps["sem_seg"] = losses.cross_entropy_seg(p_s, src_batch[2])
            comps["lovasz"] = losses.lovasz_softmax(p_s, src_batch[1])
        try:
            loss = losses.total_loss(comps, cfg.weights)
        except FloatingPointError as e_nan:
            raise RuntimeError(f"stage 3 aborted at iteration {it}: {e_nan}") from e_nan
        gnorm = None
        if loss.item() != 0.0:
            loss.backward()
            gnorm = float(torch.nn.utils.clip_grad_norm_(
                model.semantic.parameters(),
                cfg.grad_clip if cfg.grad_clip > 0 else float("inf")))
            opt.step()

        done = it + 1
        if done % cfg.log_every == 0 or done == cfg.iters_stage3:
            record = {"stage": 3, "iter": done, "lr_gen": lr}
            if gnorm is not None:
                record["gnorm_gen"] = gnorm
            record.update({f"loss_{k}": v.item() for k, v in comps.items()})
            _append_metrics(metrics_path, record)

    _set_requires_grad(model.edge, True)
    _set_requires_grad(model.d_sem, True)
    _set_requires_grad(model.d_eg, True)
    return save_checkpoint(out_dir, model, cfg, cfg.iters_stage3, 3, {"gen": opt}, streams)
