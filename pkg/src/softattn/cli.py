"""``softattn`` command line: train, eval, viz and gradcheck."""

from __future__ import annotations

import argparse
import logging
import math
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import nn
from .attention import SoftAttentionConfig, upsample_alpha
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import (RebalancePolicy, SplitSpec, encode_ppm, load_dataset, load_manifest, rebalance,
                   stack_samples, stratified_split, synth_lesion_dataset)
from .errors import SoftAttnError
from .metrics import metrics_from_confusion
from .model import AdamState, EarlyStopping, ModelGraph, batch_loss, build_mininet, evaluate, train_loop
from .plotting import plot_attention_panel, plot_gradcam_comparison, plot_history, plot_roc
from .tensor import finite_diff_check, seeded_rng
from .viz import colorize, default_gradcam_layer, gradcam, minmax, overlap_topq, render_heatmap, upsample_map

log = logging.getLogger("softattn")

SYNTH_CLASSES = ["background", "lesion"]
HISTORY_COLUMNS = ["epoch", "batch_loss", "train_loss", "train_acc", "val_loss", "val_acc"]


class CheckFailed(Exception):
    """A check ran to completion but its result is over threshold."""


# ---------------------------------------------------------------- data


def load_samples(cfg: RunConfig):
    """(samples, class names) from the manifest or, if none is set, the synthetic generator."""
    size = cfg["data.image_size"]
    if cfg["data.manifest"]:
        manifest = load_manifest(cfg["data.manifest"])
        return load_dataset(manifest, (size, size)), list(manifest.class_names)
    samples = synth_lesion_dataset(cfg["data.synth.n_per_class"], size, cfg["data.synth.patch"],
                                   cfg["data.synth.noise"], seeded_rng(cfg["data.synth.seed"]))
    return samples, list(SYNTH_CLASSES)


def prepare_splits(cfg: RunConfig):
    """(train, val, test, class names): test split first, then validation out of train.

    Only the training part is rebalanced so evaluation sees the true class mix.
    """
    samples, names = load_samples(cfg)
    seed, strat = cfg["split.seed"], cfg["split.stratified"]
    rest, test = stratified_split(samples, SplitSpec(cfg["split.test_fraction"], seed, strat))
    train, val = stratified_split(rest, SplitSpec(cfg["split.val_fraction"], seed + 1, strat))
    if cfg["rebalance.enabled"]:
        target = cfg["rebalance.target"]
        target = int(target) if target.isdigit() else target
        train = rebalance(train, RebalancePolicy(target, cfg["rebalance.seed"]), len(names))
    return train, val, test, names


def sa_config(cfg: RunConfig) -> SoftAttentionConfig | None:
    if not cfg["model.sa.enabled"]:
        return None
    kernel = cfg["model.sa.kernel"]
    if kernel != "full":
        m = re.fullmatch(r"(\d+)x(\d+)", kernel)
        if not m:
            raise ConfigError(f"model.sa.kernel must look like 3x3 or be 'full', got {kernel!r}")
        kernel = (int(m.group(1)), int(m.group(2)))
    return SoftAttentionConfig(k=cfg["model.sa.k"], kernel=kernel,
                               gamma_init=cfg["model.sa.gamma_init"], dropout=cfg["model.sa.dropout"])


def snapshot_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg["eval.snapshot"]) if cfg["eval.snapshot"] else out / "model.npz"


def safe_id(source_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", source_id).strip("_") or "sample"


def interleave_classes(samples):
    """Reorder so classes alternate, keeping the order within each class."""
    seen: dict[int, int] = {}
    ranks = []
    for s in samples:
        ranks.append(seen.get(s.label, 0))
        seen[s.label] = ranks[-1] + 1
    order = sorted(range(len(samples)), key=lambda i: (ranks[i], samples[i].label))
    return [samples[i] for i in order]


def _write_ppm(path: Path, image: np.ndarray) -> None:
    path.write_bytes(encode_ppm(np.clip(np.rint(image), 0, 255).astype(np.uint8)))


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out: Path) -> None:
    train, val, test, names = prepare_splits(cfg)
    model = build_mininet(len(names), sa_config(cfg), seeded_rng(cfg["model.seed"]),
                          cfg["data.image_size"])
    optim = AdamState(cfg["optim.lr"], cfg["optim.eps"], cfg["optim.beta1"], cfg["optim.beta2"])
    model, history = train_loop(model, train, val, cfg["train.epochs"], cfg["train.batch_size"],
                                EarlyStopping(cfg["train.patience"]), seeded_rng(cfg["train.seed"]), optim)
    model.save(out / "model.npz")
    lines = ["\t".join(HISTORY_COLUMNS)]
    lines += ["\t".join(str(h[c]) if c == "epoch" else f"{h[c]:.6f}" for c in HISTORY_COLUMNS)
              for h in history]
    (out / "history.tsv").write_text("\n".join(lines) + "\n")
    if history:
        plot_history(history, out / "history.png")
        last = history[-1]
        print(f"trained {len(history)} epochs: train acc {last['train_acc']:.3f}, "
              f"val acc {last['val_acc']:.3f}")
    print(f"model written to {out / 'model.npz'}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    _, _, test, names = prepare_splits(cfg)
    model = ModelGraph.load(snapshot_path(cfg, out))
    cm, scores = evaluate(model, test)
    labels = np.array([s.label for s in test])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = metrics_from_confusion(cm, scores, labels, names)
    for w in caught:
        log.warning("%s", w.message)
    (out / "metrics.txt").write_text(report.to_text())
    (out / "metrics.tsv").write_text(report.to_tsv())
    plot_roc(scores, labels, names, out / "roc.png")
    print(report.to_text(), end="")


def cmd_viz(cfg: RunConfig, out: Path) -> None:
    _, _, test, names = prepare_splits(cfg)
    model = ModelGraph.load(snapshot_path(cfg, out))
    if model.sa_block is None:
        raise SoftAttnError("viz needs a model with a soft-attention block")
    layer = cfg["viz.gradcam_layer"]
    layer = default_gradcam_layer(model) if layer < 0 else layer
    if cfg["viz.count"] < 1:
        raise ConfigError("viz.count must be >= 1")
    picked = interleave_classes(test)[:cfg["viz.count"]]
    x, _ = stack_samples(picked)
    logits = model.forward(x, nn.INFER)
    alphas = model.sa_block.last.alpha.data
    preds = logits.data.argmax(axis=1)
    rows = ["sample\tlabel\tpredicted\tq\tiou"]
    images, maps, overlays, attn, cams, ious, titles = [], [], [], [], [], [], []
    for s, alpha, pred in zip(picked, alphas, preds):
        sid = safe_id(s.source_id)
        shape = s.image.shape[:2]
        heat, overlay = render_heatmap(alpha, s.image, cfg["viz.blend"], cfg["viz.colormap"])
        cam = upsample_map(gradcam(model, s.image, layer, int(pred)), shape)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cam_img = colorize(minmax(cam), cfg["viz.colormap"])
        _write_ppm(out / f"alpha_{sid}.ppm", heat)
        _write_ppm(out / f"overlay_{sid}.ppm", overlay)
        _write_ppm(out / f"gradcam_{sid}.ppm", cam_img)
        a_up = upsample_alpha(alpha, shape).data
        iou = overlap_topq(a_up, cam, cfg["viz.q"]).iou if cam.sum() > 0 else math.nan
        rows.append(f"{s.source_id}\t{names[s.label]}\t{names[pred]}\t{cfg['viz.q']}\t{iou:.6f}")
        images.append(s.image)
        maps.append(heat)
        overlays.append(overlay)
        attn.append(a_up)
        cams.append(cam)
        ious.append(iou)
        titles.append(f"{names[s.label]} -> {names[pred]}")
    (out / "overlap.tsv").write_text("\n".join(rows) + "\n")
    plot_attention_panel(images, maps, overlays, titles, out / "attention.png")
    plot_gradcam_comparison(images, attn, cams, ious, titles, out / "gradcam.png")
    print(f"wrote maps for {len(picked)} samples to {out}")


def gradcheck_setup(cfg: RunConfig):
    """(model, batch images, labels) for the finite-difference check."""
    n = cfg["gradcheck.batch"]
    sa = sa_config(cfg)
    if sa is not None:
        sa = SoftAttentionConfig(sa.k, sa.kernel, cfg["gradcheck.gamma"], sa.dropout)
    model = build_mininet(2, sa, seeded_rng(cfg["model.seed"]), cfg["data.image_size"])
    samples = synth_lesion_dataset(math.ceil(n / 2), cfg["data.image_size"], cfg["data.synth.patch"],
                                   cfg["gradcheck.noise"], seeded_rng(cfg["data.synth.seed"]))
    # alternate classes so any batch size mixes both
    half = len(samples) // 2
    order = [i for pair in zip(range(half), range(half, 2 * half)) for i in pair]
    x, y = stack_samples([samples[i] for i in order[:n]])
    return model, x, y


def cmd_gradcheck(cfg: RunConfig, out: Path) -> None:
    model, x, y = gradcheck_setup(cfg)
    err = finite_diff_check(lambda: batch_loss(model, x, y, nn.TRAIN, dropout=False),
                            model.parameters(), cfg["gradcheck.h"])
    (out / "gradcheck.txt").write_text(f"max_rel_error\t{err:.3e}\n")
    print(f"max relative error {err:.3e} (tolerance {cfg['gradcheck.tol']:.1e})")
    if not err < cfg["gradcheck.tol"]:
        raise CheckFailed(f"gradient check failed: {err:.3e} >= {cfg['gradcheck.tol']:.1e}")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "viz": cmd_viz, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softattn", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, help="top-level seed; derives every seed left at -1")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        if args.out is not None:
            cfg.set("out", args.out)
        cfg = cfg.resolved()
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        COMMANDS[args.command](cfg, out)
    except CheckFailed as e:
        print(f"softattn: {e}", file=sys.stderr)
        return 1
    except (SoftAttnError, OSError, ValueError) as e:
        # ValueError also covers unreadable or foreign snapshot files
        print(f"softattn {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
