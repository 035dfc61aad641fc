"""Training loop, evaluation metrics, ablation harness, and mask export.

The metrics log is line-delimited JSON, one record per line with keys
epoch, split, loss, top1, top5, wall_seconds. Everything except
wall_seconds is deterministic for a fixed seed and config; timing is
informational and excluded from determinism comparisons. Checkpoints are
written every epoch: last.r3ck always, best.r3ck whenever eval top-1
strictly improves.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import AugmentConfig, LabeledClip, augment_clip, eval_preprocess
from .modules import BatchNorm3d
from .network import NetworkSpec, Res3ATN, build_res3atn
from .ops import softmax_cross_entropy
from .optim import NesterovSGD
from .tensor import Tape, Tensor, backward

PAPER_GRID = ((), (1,), (2,), (3,), (1, 2), (1, 3), (2, 3), (1, 2, 3))

# rng stream tags so shuffle and augmentation draws never collide
_STREAM_SHUFFLE = 1
_STREAM_AUGMENT = 2


@dataclass(frozen=True)
class RunConfig:
    """One training run: architecture, preprocessing, optimizer, loop knobs."""

    network: NetworkSpec
    augment: AugmentConfig
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    decay_bn: bool = True
    batch_size: int = 6
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.augment.crop != self.network.input_size:
            raise ValueError(
                f"augment crop {self.augment.crop} must equal "
                f"network input_size {self.network.input_size}"
            )
        if self.augment.frames_out != self.network.input_frames:
            raise ValueError(
                f"augment frames_out {self.augment.frames_out} must equal "
                f"network input_frames {self.network.input_frames}"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        n = self.network
        a = self.augment
        return {
            "network": {
                "num_classes": n.num_classes,
                "input_frames": n.input_frames,
                "input_size": n.input_size,
                "input_channels": n.input_channels,
                "attention_sites": list(n.attention_sites),
                "channel_scale": n.channel_scale,
            },
            "augment": {
                "crop": a.crop,
                "elastic_sigma": a.elastic_sigma,
                "elastic_alpha": a.elastic_alpha,
                "frames_out": a.frames_out,
            },
            "optimizer": {
                "lr": self.lr,
                "momentum": self.momentum,
                "weight_decay": self.weight_decay,
                "decay_bn": self.decay_bn,
            },
            "run": {
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "seed": self.seed,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {"network", "augment", "optimizer", "run"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        net = dict(d.get("network", {}))
        if "attention_sites" in net:
            net["attention_sites"] = tuple(net["attention_sites"])
        aug = dict(d.get("augment", {}))
        opt = dict(d.get("optimizer", {}))
        run = dict(d.get("run", {}))
        return RunConfig(
            network=NetworkSpec(**net), augment=AugmentConfig(**aug), **opt, **run
        )


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    top1: float
    top5: float
    wall_seconds: float

    def content(self) -> dict:
        """Deterministic portion, i.e. everything but wall_seconds."""
        return {
            "epoch": self.epoch,
            "split": self.split,
            "loss": self.loss,
            "top1": self.top1,
            "top5": self.top5,
        }

    def to_json(self) -> str:
        d = self.content()
        d["wall_seconds"] = self.wall_seconds
        return json.dumps(d)

    @staticmethod
    def from_json(line: str) -> "MetricsRecord":
        return MetricsRecord(**json.loads(line))

    def __str__(self):
        return (
            f"epoch {self.epoch:3d} {self.split:5s} loss {self.loss:.4f} "
            f"top1 {self.top1:6.2f} top5 {self.top5:6.2f} ({self.wall_seconds:.1f}s)"
        )


def read_metrics(path) -> list[MetricsRecord]:
    lines = Path(path).read_text().splitlines()
    return [MetricsRecord.from_json(ln) for ln in lines if ln.strip()]


def _check_labels(clips: list[LabeledClip], num_classes: int, split: str) -> None:
    if not clips:
        raise ValueError(f"{split} split is empty")
    labels = {c.label for c in clips}
    bad = sorted(l for l in labels if l < 0 or l >= num_classes)
    if bad:
        raise ValueError(f"{split} split has labels {bad} outside 0..{num_classes - 1}")
    if split == "train" and len(labels) != num_classes:
        raise ValueError(
            f"train split covers {len(labels)} classes, network expects {num_classes}"
        )


def _topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated logits ranks tied classes by lower index
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (ranked == labels[:, None]).any(axis=1)


def evaluate(
    net: Res3ATN,
    clips: list[LabeledClip],
    augment: AugmentConfig,
    batch_size: int = 6,
    epoch: int = 0,
) -> MetricsRecord:
    """Center-window, center-crop forward pass; partial batches kept."""
    if not clips:
        raise ValueError("evaluate: eval split is empty")
    start = time.perf_counter()
    num_classes = net.spec.num_classes
    k = min(5, num_classes)
    net.eval()
    loss_sum = 0.0
    hit1 = 0
    hitk = 0
    for lo in range(0, len(clips), batch_size):
        batch = clips[lo : lo + batch_size]
        x = np.concatenate([eval_preprocess(c, augment) for c in batch])
        y = np.array([c.label for c in batch], dtype=np.int64)
        logits = net(Tensor(x))
        loss = softmax_cross_entropy(logits, y)
        loss_sum += float(loss.item()) * len(batch)
        hit1 += int(_topk_hits(logits.data, y, 1).sum())
        hitk += int(_topk_hits(logits.data, y, k).sum())
    n = len(clips)
    return MetricsRecord(
        epoch=epoch,
        split="eval",
        loss=loss_sum / n,
        top1=100.0 * hit1 / n,
        top5=100.0 * hitk / n,
        wall_seconds=time.perf_counter() - start,
    )


def _augment_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed, _STREAM_AUGMENT, epoch, position))
    )


def _prime_batchnorm(net: Res3ATN, clips, config: RunConfig) -> None:
    """One train-mode forward so running stats exist before any eval."""
    net.train()
    take = clips[: max(2, min(config.batch_size, len(clips)))]
    x = np.concatenate([eval_preprocess(c, config.augment) for c in take])
    net(Tensor(x))


def train(
    config: RunConfig,
    train_clips: list[LabeledClip],
    eval_clips: list[LabeledClip],
    out_dir,
    log=None,
) -> dict:
    """Run the full loop and return a summary dict.

    Writes metrics.jsonl, last.r3ck, best.r3ck, and summary.txt under
    out_dir. Aborts with the offending epoch/batch id if the loss leaves
    the finite range. epochs=0 still emits an initialization checkpoint
    and one eval record (running stats primed by a single forward pass).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_labels(train_clips, config.network.num_classes, "train")
    _check_labels(eval_clips, config.network.num_classes, "eval")

    net = build_res3atn(config.network, seed=config.seed)
    opt = NesterovSGD(
        net.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        decay_bn=config.decay_bn,
    )
    config_dict = config.to_dict()
    metrics_path = out_dir / "metrics.jsonl"
    records: list[MetricsRecord] = []
    best_top1 = float("-inf")
    best_epoch = -1

    def emit(rec: MetricsRecord, fh) -> None:
        records.append(rec)
        fh.write(rec.to_json() + "\n")
        fh.flush()
        if log:
            log(str(rec))

    with open(metrics_path, "w") as fh:
        if config.epochs == 0:
            _prime_batchnorm(net, train_clips, config)
            rec = evaluate(net, eval_clips, config.augment, config.batch_size, epoch=0)
            emit(rec, fh)
            save_checkpoint(out_dir / "last.r3ck", net, optimizer=opt, epoch=0,
                            run_config=config_dict)
            save_checkpoint(out_dir / "best.r3ck", net, optimizer=opt, epoch=0,
                            run_config=config_dict)
            best_top1, best_epoch = rec.top1, 0

        for epoch in range(config.epochs):
            start = time.perf_counter()
            net.train()
            shuffle_rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, _STREAM_SHUFFLE, epoch))
            )
            order = shuffle_rng.permutation(len(train_clips))
            n_batches = len(order) // config.batch_size
            if n_batches == 0:
                raise ValueError(
                    f"train split ({len(order)} clips) smaller than one batch "
                    f"of {config.batch_size}"
                )
            loss_sum = 0.0
            hit1 = 0
            hitk = 0
            seen = 0
            k = min(5, config.network.num_classes)
            for b in range(n_batches):
                positions = range(b * config.batch_size, (b + 1) * config.batch_size)
                xs, ys, ids = [], [], []
                for pos in positions:
                    clip = train_clips[order[pos]]
                    xs.append(augment_clip(clip, config.augment,
                                           _augment_rng(config.seed, epoch, pos)))
                    ys.append(clip.label)
                    ids.append(clip.clip_id)
                x = Tensor(np.concatenate(xs))
                y = np.array(ys, dtype=np.int64)
                try:
                    with Tape():
                        logits = net(x)
                        loss = softmax_cross_entropy(logits, y)
                    loss_value = float(loss.item())
                    if not np.isfinite(loss_value):
                        raise FloatingPointError(f"loss = {loss_value}")
                    backward(loss)
                    opt.step()
                except (AssertionError, FloatingPointError) as exc:
                    raise RuntimeError(
                        f"training aborted at epoch {epoch} batch {b} "
                        f"(clips {ids}): {exc}"
                    ) from exc
                loss_sum += loss_value * len(ys)
                hit1 += int(_topk_hits(logits.data, y, 1).sum())
                hitk += int(_topk_hits(logits.data, y, k).sum())
                seen += len(ys)
            emit(
                MetricsRecord(
                    epoch=epoch,
                    split="train",
                    loss=loss_sum / seen,
                    top1=100.0 * hit1 / seen,
                    top5=100.0 * hitk / seen,
                    wall_seconds=time.perf_counter() - start,
                ),
                fh,
            )
            rec = evaluate(net, eval_clips, config.augment, config.batch_size, epoch)
            emit(rec, fh)
            save_checkpoint(out_dir / "last.r3ck", net, optimizer=opt, epoch=epoch,
                            run_config=config_dict)
            if rec.top1 > best_top1:
                best_top1, best_epoch = rec.top1, epoch
                save_checkpoint(out_dir / "best.r3ck", net, optimizer=opt,
                                epoch=epoch, run_config=config_dict)

    summary = {
        "parameters": net.parameter_count(),
        "epochs_run": config.epochs,
        "best_epoch": best_epoch,
        "best_eval_top1": best_top1,
        "final_eval_top1": records[-1].top1 if records else float("nan"),
        "final_eval_top5": records[-1].top5 if records else float("nan"),
        "final_eval_loss": records[-1].loss if records else float("nan"),
        "last_checkpoint": str(out_dir / "last.r3ck"),
        "best_checkpoint": str(out_dir / "best.r3ck"),
    }
    lines = ["metric                value", "-" * 34]
    for key in ("parameters", "epochs_run", "best_epoch", "best_eval_top1",
                "final_eval_top1", "final_eval_top5", "final_eval_loss"):
        value = summary[key]
        text = f"{value:.4f}" if isinstance(value, float) else str(value)
        lines.append(f"{key:<20s}  {text}")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


# ---------------------------------------------------------------------------
# ablation harness

def _sites_tag(sites) -> str:
    return "".join(str(s) for s in sites) or "none"


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'sites':<8s} {'blocks':>6s} {'parameters':>11s} {'top1':>7s} {'top5':>7s}"
    out = [header, "-" * len(header)]
    for r in rows:
        tag = _sites_tag(r["sites"]) if r["sites"] else "(none)"
        out.append(
            f"{tag:<8s} {len(r['sites']):>6d} {r['parameters']:>11d} "
            f"{r['final_eval_top1']:>7.2f} {r['final_eval_top5']:>7.2f}"
        )
    return "\n".join(out)


def ablation_run(
    base: RunConfig,
    sites_list,
    train_clips: list[LabeledClip],
    eval_clips: list[LabeledClip],
    out_dir,
    log=None,
) -> list[dict]:
    """Train one variant per attention-site subset under identical settings."""
    sites_list = [tuple(sorted(s)) for s in sites_list]
    if not sites_list:
        raise ValueError("ablation grid is empty")
    if len(set(sites_list)) != len(sites_list):
        raise ValueError("ablation grid contains duplicate subsets")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for sites in sites_list:
        cfg = replace(base, network=replace(base.network, attention_sites=sites))
        run_dir = out_dir / f"sites_{_sites_tag(sites)}"
        if log:
            log(f"== attention sites {sites or '(none)'} ==")
        summary = train(cfg, train_clips, eval_clips, run_dir, log=log)
        rows.append(
            {
                "sites": sites,
                "parameters": summary["parameters"],
                "final_eval_top1": summary["final_eval_top1"],
                "final_eval_top5": summary["final_eval_top5"],
                "best_eval_top1": summary["best_eval_top1"],
            }
        )
    table = format_ablation_table(rows)
    (out_dir / "ablation.txt").write_text(table + "\n")
    (out_dir / "ablation.json").write_text(
        json.dumps([{**r, "sites": list(r["sites"])} for r in rows], indent=2) + "\n"
    )
    if log:
        log(table)
    return rows


# ---------------------------------------------------------------------------
# attention-mask export

def _write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.astype(np.uint8).tobytes())


def export_attention_masks(net: Res3ATN, clip: LabeledClip, out_dir) -> list[Path]:
    """Write each site's channel-averaged soft mask as one PGM per frame.

    Uses eval mode when running statistics exist; otherwise falls back to a
    train-mode forward with frozen running buffers so a freshly initialized
    network can still be inspected.
    """
    if not net.spec.attention_sites:
        raise ValueError("network has no attention sites enabled")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = AugmentConfig(
        crop=net.spec.input_size, frames_out=net.spec.input_frames, elastic_alpha=0.0
    )
    x = Tensor(eval_preprocess(clip, cfg))
    bns = [m for m in net.modules() if isinstance(m, BatchNorm3d)]
    ready = all(bn.stats_ready for bn in bns)
    if ready:
        net.eval()
        captured = net.attention_masks(x)
    else:
        net.train()
        for bn in bns:
            bn.update_running = False
        try:
            captured = net.attention_masks(x)
        finally:
            for bn in bns:
                bn.update_running = True
    paths = []
    for site in sorted(captured):
        mask = captured[site].data[0]  # (C, F, H, W)
        gray = mask.mean(axis=0)  # channel average, values in (0, 1)
        for f in range(gray.shape[0]):
            img = np.clip(np.rint(gray[f] * 255.0), 0, 255)
            path = out_dir / f"site{site}_frame{f}.pgm"
            _write_pgm(path, img)
            paths.append(path)
    return paths
