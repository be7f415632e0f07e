"""Command-line driver: dataset generation, the three training stages, evaluation.

Every command reads an optional ``--config`` file plus ``--key value``
overrides and writes ``manifest_<command>.json`` into ``out_dir``.
Exit status: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import io
import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .camera import load_cameras, mine_view_pairs
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_config, read_config_file
from .imageio import read_pgm, read_ppm, write_pfm, write_pgm, write_ppm
from .metrics import ConfusionMatrix, confusion, fps_benchmark, psnr, scores_from_confusion, ssim
from .raster import RasterConfig, render
from .scene import SceneError, load_ply, save_ply
from .synthetic import generate_synthetic_scene, write_dataset

log = logging.getLogger("splatseg")

COMMANDS = ("make-synthetic", "fit-appearance", "mine-pairs", "train-vi", "train-sem", "finetune",
            "eval", "render", "bench", "ablate")
TABLE_COLUMNS = ("mIoU", "mAcc", "oAcc", "PSNR", "SSIM", "FPS")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ---------------------------------------------------------------------------

def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def raster_config(cfg: RunConfig) -> RasterConfig:
    return RasterConfig(tile=cfg.tile, t_min=cfg.t_min, threads=cfg.threads)


class SceneDir:
    """scene.ply, cameras.json, images/NNN.ppm, masks/NNN.pgm, depth/NNN.pfm."""

    def __init__(self, root: str | Path, ply_name: str = "scene.ply"):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"scene directory {self.root} does not exist")
        self.ply = self.root / ply_name
        if not self.ply.is_file():
            raise DataError(f"{self.root}: missing {ply_name}")
        if not (self.root / "cameras.json").is_file():
            raise DataError(f"{self.root}: missing cameras.json")
        self.scene = load_ply(self.ply)
        self.cameras = load_cameras(self.root / "cameras.json")

    def _file(self, sub: str, j: int, ext: str) -> Path:
        p = self.root / sub / f"{j:03d}.{ext}"
        if not p.is_file():
            raise DataError(f"{self.root}: view {j} has no {sub[:-1] if sub.endswith('s') else sub} file {p.name}")
        return p

    def image(self, j: int) -> np.ndarray:
        return read_ppm(self._file("images", j, "ppm"))

    def mask(self, j: int) -> np.ndarray:
        return read_pgm(self._file("masks", j, "pgm"))

    def views(self, cfg: RunConfig, split: str) -> list[int]:
        n = len(self.cameras)
        bad = [v for v in cfg.holdout if not 0 <= v < n]
        if bad:
            raise DataError(f"{self.root}: holdout views {bad} out of range for {n} cameras")
        hold = sorted(set(cfg.holdout))
        if split == "train":
            return [j for j in range(n) if j not in hold]
        if split == "holdout" and hold:
            return hold
        return list(range(n))


def _scene_dirs(cfg: RunConfig, ply_name: str | None = None) -> list[SceneDir]:
    roots = list(cfg.scenes) or ([cfg.scene] if cfg.scene else [])
    if not roots:
        raise UsageError("no scene given: set 'scene' or 'scenes'")
    return [SceneDir(r, ply_name or cfg.ply_name) for r in roots]


def _one_scene(cfg: RunConfig) -> SceneDir:
    if not cfg.scene:
        raise UsageError("this command needs 'scene'")
    return SceneDir(cfg.scene, cfg.ply_name)


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"this command needs '{what}'")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file {p} does not exist")
    return p


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    return f"{v:.3f}" if np.isfinite(v) else "inf"


def format_table(rows: list[tuple[str, dict]], columns=TABLE_COLUMNS) -> str:
    head = ["run"] + list(columns)
    body = [[name] + [_fmt(vals.get(c)) for c in columns] for name, vals in rows]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    line = lambda r: "  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(r, widths)))
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in body]) + "\n"


def _sem_train_config(cfg: RunConfig, steps: int | None = None):
    from .fusion import SemLossConfig, SemTrainConfig

    loss = SemLossConfig(lambda_ceco=cfg.lambda_ceco if cfg.use_ceco else 0.0,
                         eps_lsr=cfg.eps_lsr if cfg.use_lsr else 0.0, ceco_variant=cfg.ceco_variant)
    return SemTrainConfig(lr=cfg.sem_lr, weight_decay=cfg.sem_weight_decay,
                          warmup_epochs=cfg.warmup_epochs,
                          steps=cfg.sem_steps if steps is None else steps, mode=cfg.mode,
                          use_z=cfg.use_z, use_image=cfg.use_image, c=cfg.c, skips=cfg.skips,
                          seed=cfg.resolved_seed(), loss=loss, raster=raster_config(cfg))


def _load_encoder(cfg: RunConfig):
    from .vi_features import EncoderConfig, PointEncoder

    state = load_checkpoint(_require(cfg.encoder, "encoder"))
    enc = PointEncoder(EncoderConfig(cfg.hidden, cfg.layers, cfg.k, cfg.feat_dim, cfg.resolved_seed()))
    try:
        enc.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"encoder checkpoint {cfg.encoder} does not match hidden/layers/k/feat_dim: {exc}")
    return enc


def _load_model(cfg: RunConfig):
    from .fusion import SegModel

    try:
        return SegModel.load(_require(cfg.model, "model"), raster_config(cfg))
    except KeyError as exc:
        raise DataError(str(exc).strip("'\""))


def _train_views(d: SceneDir, cfg: RunConfig):
    idx = d.views(cfg, "train")
    return [d.cameras[j] for j in idx], [d.mask(j) for j in idx]


# -- commands --------------------------------------------------------------------------

def cmd_make_synthetic(cfg: RunConfig, out: Path) -> dict:
    data = generate_synthetic_scene(cfg.layout, cfg.n_classes, cfg.count, cfg.resolved_seed(),
                                    cfg.n_views, cfg.width, cfg.height, cfg.palette_mix,
                                    raster_config(cfg))
    write_dataset(data, out)
    return {"outputs": {"dataset": str(out)}, "metrics": {"gaussians": len(data.scene),
                                                          "views": len(data.cameras)}}


def cmd_fit_appearance(cfg: RunConfig, out: Path) -> dict:
    from .appearance import FitConfig, fit_appearance

    d = _one_scene(cfg)
    scene = d.scene.copy()
    if cfg.reset_appearance:
        scene.sh = np.zeros_like(scene.sh)
        scene.opacity_logits = np.zeros(len(scene))
    idx = d.views(cfg, cfg.appearance_split)
    fit_cfg = FitConfig(steps=cfg.appearance_steps, lr_sh=cfg.lr_sh, lr_opacity=cfg.lr_opacity,
                        lam=cfg.lambda_dssim, lr_final=cfg.lr_final, raster=raster_config(cfg))
    fitted, losses, epochs = fit_appearance(scene, [d.cameras[j] for j in idx],
                                            [d.image(j) for j in idx], fit_cfg)
    target = d.root / cfg.fitted_name
    save_ply(fitted, target)
    _write_csv(out / "appearance_loss.csv", ["step", "loss"], enumerate(losses))
    quality = [psnr(np.clip(render(fitted, d.cameras[j], cfg=raster_config(cfg)).image, 0, 1), d.image(j))
               for j in idx]
    return {"outputs": {"fitted_ply": str(target)},
            "metrics": {"final_loss": losses[-1] if losses else None, "mean_psnr": float(np.mean(quality))}}


def cmd_mine_pairs(cfg: RunConfig, out: Path) -> dict:
    d = _one_scene(cfg)
    pairs = mine_view_pairs(d.scene, d.cameras, cfg.overlap_lo, cfg.overlap_hi)
    for m, n, ov in pairs:
        print(f"{m} {n} {ov:.4f}")
    _write_csv(out / "pairs.csv", ["view_m", "view_n", "overlap"], pairs)
    return {"outputs": {"pairs": str(out / "pairs.csv")}, "metrics": {"n_pairs": len(pairs)}}


def cmd_train_vi(cfg: RunConfig, out: Path) -> dict:
    from .vi_features import VITrainConfig, train_vi

    dirs = _scene_dirs(cfg)
    vcfg = VITrainConfig(tau=cfg.tau, n_corr=cfg.n_corr, voxel=cfg.voxel, overlap_lo=cfg.overlap_lo,
                         overlap_hi=cfg.overlap_hi, lr=cfg.lr, weight_decay=cfg.vi_weight_decay,
                         epochs=cfg.epochs, max_steps=cfg.vi_max_steps or None,
                         seed=cfg.resolved_seed(), k=cfg.k, hidden=cfg.hidden, layers=cfg.layers,
                         feat_dim=cfg.feat_dim, checkpoint_dir=str(out / "checkpoints"))
    cams = [[d.cameras[j] for j in d.views(cfg, "train")] for d in dirs]
    enc, trace = train_vi([d.scene for d in dirs], cams, vcfg)
    save_checkpoint(out / "encoder.ckpt", enc.state_dict())
    _write_csv(out / "vi_loss.csv", ["step", "loss_per_pair"], enumerate(trace))
    return {"outputs": {"encoder": str(out / "encoder.ckpt")},
            "metrics": {"steps": len(trace), "first10": float(np.mean(trace[:10])),
                        "last10": float(np.mean(trace[-10:]))}}


def _build_model(cfg: RunConfig, encoder):
    from .fusion import FusionNet, SegModel

    net = FusionNet(cfg.n_classes, cfg.feat_dim, cfg.c, cfg.resolved_seed(), skips=cfg.skips)
    return SegModel(encoder if cfg.use_z else None, net, cfg.use_z, cfg.use_image, raster_config(cfg))


def _train_sem_model(cfg: RunConfig, dirs: list[SceneDir], encoder):
    from .fusion import train_sem

    model = _build_model(cfg, encoder)
    cams, masks = zip(*[_train_views(d, cfg) for d in dirs])
    return train_sem([d.scene for d in dirs], list(cams), list(masks), model, _sem_train_config(cfg))


def cmd_train_sem(cfg: RunConfig, out: Path) -> dict:
    dirs = _scene_dirs(cfg)
    encoder = _load_encoder(cfg) if cfg.use_z else None
    model, trace = _train_sem_model(cfg, dirs, encoder)
    model.save(out / "model.ckpt")
    _write_csv(out / "sem_loss.csv", ["step", "loss"], enumerate(trace))
    return {"outputs": {"model": str(out / "model.ckpt")},
            "metrics": {"steps": len(trace), "first10": float(np.mean(trace[:10])),
                        "last10": float(np.mean(trace[-10:]))}}


def cmd_finetune(cfg: RunConfig, out: Path) -> dict:
    from .fusion import finetune_scene

    model = _load_model(cfg)
    d = _one_scene(cfg)
    cams, masks = _train_views(d, cfg)
    model, trace = finetune_scene(model, d.scene, cams, masks, _sem_train_config(cfg, cfg.finetune_steps))
    model.save(out / "model.ckpt")
    _write_csv(out / "finetune_loss.csv", ["step", "loss"], enumerate(trace))
    return {"outputs": {"model": str(out / "model.ckpt")}, "metrics": {"steps": len(trace)}}


def evaluate_scene(model, d: SceneDir, views: list[int], n_classes: int,
                   clock: Callable[[], float] = time.perf_counter):
    """Per-view rows, pooled scores and the mean inference rate over ``views``."""
    from .fusion import infer_view

    model.scene_features(d.scene)   # one encoder pass, outside the per-view timing
    total = ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
    rows, ps, ss, elapsed = [], [], [], 0.0
    for j in views:
        t0 = clock()
        res = infer_view(model, d.scene, d.cameras[j])
        elapsed += clock() - t0
        cm = confusion(res["mask"], d.mask(j), n_classes)
        total = total + cm
        img = d.image(j)
        p = psnr(np.clip(res["image"], 0, 1), img)
        s = ssim(np.clip(res["image"], 0, 1), img)
        ps.append(p)
        ss.append(s)
        sc = scores_from_confusion(cm) if cm.total else {"mIoU": float("nan"), "mAcc": float("nan"),
                                                         "oAcc": float("nan")}
        rows.append([j, sc["mIoU"], sc["mAcc"], sc["oAcc"], p, s] + cm.counts.reshape(-1).tolist())
    agg = scores_from_confusion(total)
    summary = {"mIoU": agg["mIoU"], "mAcc": agg["mAcc"], "oAcc": agg["oAcc"],
               "PSNR": float(np.mean(ps)), "SSIM": float(np.mean(ss)),
               "FPS": len(views) / elapsed if elapsed > 0 else float("inf")}
    return rows, summary, total


def _confusion_header(k: int) -> list[str]:
    return [f"c{g}_{p}" for g in range(k) for p in range(k)]


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    k = cfg.n_classes
    header = ["view", "mIoU", "mAcc", "oAcc", "PSNR", "SSIM"] + _confusion_header(k)
    if cfg.pred_dir:
        d = SceneDir(cfg.scene, cfg.ply_name) if cfg.scene else None
        if d is None:
            raise UsageError("eval with pred_dir needs 'scene' for ground-truth masks")
        total = ConfusionMatrix(np.zeros((k, k), dtype=np.int64))
        rows = []
        for j in d.views(cfg, cfg.eval_split):
            p = Path(cfg.pred_dir) / f"{j:03d}.pgm"
            if not p.is_file():
                raise DataError(f"prediction {p} missing")
            cm = confusion(read_pgm(p), d.mask(j), k)
            total = total + cm
            sc = scores_from_confusion(cm)
            rows.append([j, sc["mIoU"], sc["mAcc"], sc["oAcc"], "", ""] + cm.counts.reshape(-1).tolist())
        agg = scores_from_confusion(total)
        summary = {"mIoU": agg["mIoU"], "mAcc": agg["mAcc"], "oAcc": agg["oAcc"]}
        encoder_calls = 0
    else:
        model = _load_model(cfg)
        d = _one_scene(cfg)
        rows, summary, total = evaluate_scene(model, d, d.views(cfg, cfg.eval_split), k)
        encoder_calls = model.encoder.calls if model.encoder is not None else 0
    rows.append(["all", summary["mIoU"], summary["mAcc"], summary["oAcc"],
                 summary.get("PSNR", ""), summary.get("SSIM", "")] + total.counts.reshape(-1).tolist())
    _write_csv(out / "metrics.csv", header, rows)
    table = format_table([(Path(cfg.scene).name or "scene", summary)])
    (out / "table.txt").write_text(table)
    print(table, end="")
    return {"outputs": {"metrics_csv": str(out / "metrics.csv"), "table": str(out / "table.txt")},
            "metrics": dict(summary, encoder_calls=encoder_calls)}


def cmd_render(cfg: RunConfig, out: Path) -> dict:
    d = _one_scene(cfg)
    model = _load_model(cfg) if cfg.model else None
    for sub in ("images", "depth") + (("pred", "logits") if model else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    views = d.views(cfg, cfg.eval_split)
    for j in views:
        if model is None:
            r = render(d.scene, d.cameras[j], cfg=raster_config(cfg))
            img, depth = r.image, r.depth
        else:
            from .fusion import infer_view

            res = infer_view(model, d.scene, d.cameras[j])
            img, depth = res["image"], res["depth"]
            write_pgm(out / "pred" / f"{j:03d}.pgm", res["mask"])
            for c in range(res["logits"].shape[2]):
                write_pfm(out / "logits" / f"{j:03d}_c{c}.pfm", res["logits"][:, :, c])
        write_ppm(out / "images" / f"{j:03d}.ppm", img)
        write_pfm(out / "depth" / f"{j:03d}.pfm", depth)
    return {"outputs": {"render_dir": str(out)}, "metrics": {"views": len(views)}}


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    d = _one_scene(cfg)
    model = _load_model(cfg)
    cams = [d.cameras[j] for j in d.views(cfg, cfg.eval_split)]
    results = {}
    modes = [1] + ([cfg.threads] if cfg.threads > 1 else [])
    for threads in modes:
        rc = RasterConfig(tile=cfg.tile, t_min=cfg.t_min, threads=threads)
        results[f"threads={threads}"] = fps_benchmark(d.scene, cams, model, warmup=cfg.warmup_frames,
                                                      frames=cfg.bench_frames, cfg=rc)
    for name, r in results.items():
        print(f"{name}: {r['fps']:.2f} FPS (render {r['render_ms']:.1f} ms, fusion "
              f"{r['fusion_ms']:.1f} ms, encoder once {r['encoder_ms']:.1f} ms)")
    (out / "bench.json").write_text(json.dumps(results, indent=2))
    calls = model.encoder.calls if model.encoder is not None else 0
    return {"outputs": {"bench": str(out / "bench.json")}, "metrics": dict(results, encoder_calls=calls)}


ABLATION_SETTINGS = {
    "full": {},
    "no_z": {"use_z": False},
    "no_image": {"use_image": False},
    "no_lsr": {"use_lsr": False},
    "no_ceco": {"use_ceco": False},
}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    """One semantic model per configuration row; scores pooled over held-out views."""
    from dataclasses import replace

    dirs = _scene_dirs(cfg)
    encoder = _load_encoder(cfg)
    table_rows, csv_rows, metrics = [], [], {}
    for name in cfg.ablate_rows:
        row_cfg = replace(cfg, **ABLATION_SETTINGS[name])
        model, _ = _train_sem_model(row_cfg, dirs, encoder)
        k = cfg.n_classes
        total = ConfusionMatrix(np.zeros((k, k), dtype=np.int64))
        ps, ss, fps = [], [], []
        for d in dirs:
            _, summary, cm = evaluate_scene(model, d, d.views(cfg, "holdout"), k)
            total = total + cm
            ps.append(summary["PSNR"])
            ss.append(summary["SSIM"])
            fps.append(summary["FPS"])
        sc = scores_from_confusion(total)
        vals = {"mIoU": sc["mIoU"], "mAcc": sc["mAcc"], "oAcc": sc["oAcc"],
                "PSNR": float(np.mean(ps)), "SSIM": float(np.mean(ss)), "FPS": float(np.mean(fps))}
        flags = (row_cfg.use_z, row_cfg.use_image, row_cfg.use_lsr, row_cfg.use_ceco)
        table_rows.append((name, vals))
        csv_rows.append([name, *(int(f) for f in flags), vals["mIoU"], vals["mAcc"], vals["oAcc"],
                         vals["PSNR"], vals["SSIM"]])
        metrics[name] = {k2: v for k2, v in vals.items() if k2 != "FPS"}
        log.info("ablation %s: mIoU %.4f", name, vals["mIoU"])
    _write_csv(out / "ablation.csv", ["row", "Z", "image", "LSR", "CeCo", "mIoU", "mAcc", "oAcc",
                                      "PSNR", "SSIM"], csv_rows)
    table = format_table(table_rows)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return {"outputs": {"ablation_csv": str(out / "ablation.csv")}, "metrics": metrics}


HANDLERS = {
    "make-synthetic": cmd_make_synthetic,
    "fit-appearance": cmd_fit_appearance,
    "mine-pairs": cmd_mine_pairs,
    "train-vi": cmd_train_vi,
    "train-sem": cmd_train_sem,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "render": cmd_render,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


# -- entry point -----------------------------------------------------------------------

def parse_overrides(tokens: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"--{key} needs a value")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def _parser() -> _Parser:
    p = _Parser(prog="splatseg", description="Gaussian-splat semantic segmentation toolkit.",
                add_help=True, allow_abbrev=False)
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="key = value config file or a run manifest (.json)")
    p.add_argument("--threads", type=int, help="cap on internal parallelism")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns, rest = _parser().parse_known_args(argv)
        if ns.command not in HANDLERS:
            close = difflib.get_close_matches(ns.command, COMMANDS, n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise UsageError(f"unknown command {ns.command!r}{hint}")
        values = read_config_file(ns.config) if ns.config else {}
        overrides = parse_overrides(rest)
        if ns.threads is not None:
            overrides["threads"] = str(ns.threads)
        cfg = build_config(values, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"splatseg: usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(cfg.out_dir)
    try:
        from threadpoolctl import threadpool_limits

        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=cfg.threads):
            result = HANDLERS[ns.command](cfg, out)
    except UsageError as exc:
        print(f"splatseg: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, SceneError, CheckpointError, OSError, KeyError, IndexError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"splatseg: data error: {msg}", file=sys.stderr)
        return 2
    manifest = {
        "command": ns.command,
        "argv": argv,
        "config": cfg.snapshot(),
        "seed": cfg.resolved_seed(),
        "git_describe": git_describe(),
        "version": __version__,
        **result,
    }
    (out / f"manifest_{ns.command}.json").write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return 0


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)
