"""Command-line entry point and training-loop wiring.

Subcommands: train, infer, eval, fuse, make-proto, synth, gradcheck.
Exit codes: 0 success, 1 usage, 2 data/configuration error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import geom, ingest, ndiff, objective
from .errors import (
    CheckpointError,
    DataError,
    DimensionError,
    EmptyInputError,
    NumericError,
    ParameterError,
    ProtoshapeError,
    TopologyError,
)
from .geom import PointCloud
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .objective import LossWeights, eval_metrics, overall_loss


@dataclass
class OptimConfig:
    """Adam-style optimizer settings.

    `schedule` is "cosine" (decay from lr to ~0 across the run, which
    removes the late-training step-size jitter floor on the prototype
    vertices) or "constant".
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"step size must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.schedule not in ("cosine", "constant"):
            raise ParameterError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        frac = min(max(step / max(total_steps - 1, 1), 0.0), 1.0)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainConfig:
    """Everything one training run needs; mirrors the JSON config file."""

    dataset: str
    out_dir: str
    val_dataset: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 10
    batch_size: int = 1
    k_min: int = 1
    k_max: int | None = None
    tau_mm: float = 5.0
    seed: int = 0
    deterministic: bool = True
    smooth_coarse: bool = False

    def __post_init__(self):
        if not self.dataset or not self.out_dir:
            raise ParameterError("dataset and out_dir paths must be non-empty")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.tau_mm <= 0:
            raise ParameterError(f"tau_mm must be positive, got {self.tau_mm}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        try:
            if "loss_weights" in d:
                d["loss_weights"] = LossWeights(**d["loss_weights"])
            if "optimizer" in d:
                d["optimizer"] = OptimConfig(**d["optimizer"])
        except TypeError as e:
            raise ParameterError(f"bad config: {e}") from e
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str) -> "TrainConfig":
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except OSError as e:
            raise DataError(f"{path}: {e}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON ({e})") from e


class Adam:
    """Adam over a named parameter dict; skips parameters without grads."""

    def __init__(self, params: dict, config: OptimConfig):
        self.params = params
        self.config = config
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grad_scale: float = 1.0, lr: float | None = None) -> None:
        c = self.config
        if lr is None:
            lr = c.lr
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            if c.weight_decay:
                g = g + c.weight_decay * p.data
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * (g * g)
            p.data -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


# ---------------------------------------------------------------------------
# dataset plumbing and evaluation protocol
# ---------------------------------------------------------------------------

def load_dataset(root: str) -> list:
    """Load every capture subdirectory under `root`, sorted by name."""
    if not os.path.isdir(root):
        raise DataError(f"{root}: not a directory")
    subdirs = sorted(
        d for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d))
        and os.path.exists(os.path.join(root, d, "intrinsics.json"))
    )
    if not subdirs:
        raise DataError(f"{root}: no capture directories found")
    return [(d, ingest.load_capture(os.path.join(root, d))) for d in subdirs]


def _training_cloud(capture, rng, k_min, k_max, n_points) -> PointCloud:
    cloud = ingest.sample_training_input(capture, rng, k_min, k_max)
    if len(cloud) == 0:
        cloud = ingest.fuse(capture, range(capture.n_frames))
    return ingest.resample(cloud, n_points, rng)


def refresh_batchnorm_stats(mdl: Model, captures: list, k_min: int, k_max: int,
                            seed: int, passes: int = 16) -> None:
    """Recompute batchnorm running statistics as an exact average over
    freshly sampled training-distribution inputs (precise-BN pass).

    The momentum-EMA statistics lag the weights they were collected
    under; averaging with the final weights makes inference-mode
    outputs track training-mode behavior.
    """
    rng = np.random.default_rng([seed, 3])
    n_draws = max(passes, 2 * len(captures))
    was_training = mdl.training
    mdl.train()
    for i in range(1, n_draws + 1):
        _, cap = captures[(i - 1) % len(captures)]
        cloud = _training_cloud(cap, rng, k_min, k_max, mdl.config.n_input)
        for st in mdl.bn_states.values():
            st.momentum = 1.0 / i  # running value becomes the exact mean
        mdl.forward(cloud.points)
    for st in mdl.bn_states.values():
        st.momentum = mdl.config.bn_momentum
    if not was_training:
        mdl.eval()


def validation_inputs(captures: list, n_points: int, seed: int) -> list:
    """Fixed sparse validation protocol: one frame per capture.

    Capture i contributes the back-projection of frame (i mod n), padded
    or subsampled to the network input size with a per-capture seeded
    generator, mimicking single-view field conditions.
    """
    inputs = []
    for i, (name, cap) in enumerate(captures):
        cloud = ingest.backproject(cap.observations[i % cap.n_frames], cap.intrinsics)
        if len(cloud) == 0:
            cloud = ingest.fuse(cap, range(cap.n_frames))
        rng = np.random.default_rng([seed, 9000 + i])
        inputs.append(ingest.resample(cloud, n_points, rng))
    return inputs


def evaluate_model(mdl: Model, captures: list, tau_mm: float, seed: int) -> list:
    """Per-capture EvalReports of the fine output under the sparse protocol."""
    was_training = mdl.training
    mdl.eval()
    reports = []
    for (name, cap), cloud in zip(captures, validation_inputs(captures, mdl.config.n_input, seed)):
        if cap.gt is None:
            raise DataError(f"capture {name} has no ground-truth cloud")
        result = mdl.forward(cloud.points)
        reports.append(eval_metrics(result.fine_cloud(), cap.gt, tau_mm))
    if was_training:
        mdl.train()
    return reports


def full_fusion_reports(mdl: Model, captures: list, tau_mm: float, seed: int) -> list:
    """EvalReports with all frames fused as input (training-view protocol)."""
    was_training = mdl.training
    mdl.eval()
    reports = []
    for i, (name, cap) in enumerate(captures):
        if cap.gt is None:
            raise DataError(f"capture {name} has no ground-truth cloud")
        cloud = ingest.fuse(cap, range(cap.n_frames))
        rng = np.random.default_rng([seed, 5000 + i])
        cloud = ingest.resample(cloud, mdl.config.n_input, rng)
        result = mdl.forward(cloud.points)
        reports.append(eval_metrics(result.fine_cloud(), cap.gt, tau_mm))
    if was_training:
        mdl.train()
    return reports


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def run_training(cfg: TrainConfig, quiet: bool = False) -> dict:
    """Train per the partial-sampling strategy; returns a summary dict.

    Per step: sample a random frame subset, fuse, resample, forward,
    weighted loss, backward, Adam update of all parameters including
    prototype vertices.  One JSON line per epoch is appended to
    train_log.jsonl (wall time is omitted in deterministic mode so logs
    are bitwise reproducible).  The best-by-validation-D_c and final
    checkpoints land in out_dir/best and out_dir/final.
    """
    captures = load_dataset(cfg.dataset)
    for name, cap in captures:
        if cap.gt is None:
            raise DataError(f"capture {name} has no gt.ply; training requires ground truth")
    val_captures = load_dataset(cfg.val_dataset) if cfg.val_dataset else []

    mdl = Model.initialize(cfg.model, cfg.seed).train()
    opt = Adam(mdl.parameters(), cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, 1])
    k_max = cfg.k_max if cfg.k_max is not None else captures[0][1].n_frames
    steps_per_epoch = -(-len(captures) // cfg.batch_size)
    total_opt_steps = cfg.epochs * steps_per_epoch

    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "train_log.jsonl")
    best_val = np.inf
    best_epoch = -1
    step = 0
    opt_step = 0
    history = []

    with open(log_path, "a") as log_file:
        for epoch in range(cfg.epochs):
            t_start = time.perf_counter()
            order = rng.permutation(len(captures))
            sums = {"coarse": 0.0, "fine": 0.0, "norm": 0.0, "lap": 0.0, "total": 0.0}
            n_samples = 0
            for lo in range(0, len(order), cfg.batch_size):
                chunk = order[lo: lo + cfg.batch_size]
                mdl.zero_grad()
                for ci in chunk:
                    _, cap = captures[ci]
                    cloud = _training_cloud(cap, rng, cfg.k_min, k_max, cfg.model.n_input)
                    with ndiff.Tape() as tape:
                        result = mdl.forward(cloud.points)
                        total, parts = overall_loss(result.coarse, result.fine,
                                                    cap.gt.points, cfg.loss_weights,
                                                    cfg.smooth_coarse)
                        value = total.item()
                        if not np.isfinite(value):
                            raise NumericError(f"non-finite loss at step {step}")
                        tape.backward(total)
                    for key in parts:
                        sums[key] += parts[key]
                    sums["total"] += value
                    n_samples += 1
                    step += 1
                lr = cfg.optimizer.lr_at(opt_step, total_opt_steps)
                opt.step(grad_scale=1.0 / len(chunk), lr=lr)
                opt_step += 1

            entry = {"epoch": epoch}
            for key in ("coarse", "fine", "norm", "lap", "total"):
                entry[f"loss_{key}"] = sums[key] / n_samples
            if val_captures:
                refresh_batchnorm_stats(mdl, captures, cfg.k_min, k_max, cfg.seed)
                reports = evaluate_model(mdl, val_captures, cfg.tau_mm, cfg.seed)
                entry["val_dc_mm"] = float(np.mean([r.dc_mm for r in reports]))
                entry["val_recall"] = float(np.mean([r.recall for r in reports]))
                if entry["val_dc_mm"] < best_val:
                    best_val = entry["val_dc_mm"]
                    best_epoch = epoch
                    save_checkpoint(mdl.to_checkpoint(), os.path.join(cfg.out_dir, "best"))
            if not cfg.deterministic:
                entry["wall_s"] = time.perf_counter() - t_start
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
            history.append(entry)
            if not quiet:
                print(json.dumps(entry), file=sys.stderr)

    refresh_batchnorm_stats(mdl, captures, cfg.k_min, k_max, cfg.seed)
    save_checkpoint(mdl.to_checkpoint(), os.path.join(cfg.out_dir, "final"))
    train_reports = full_fusion_reports(mdl, captures, cfg.tau_mm, cfg.seed)
    summary = {
        "steps": step,
        "log_path": log_path,
        "final_checkpoint": os.path.join(cfg.out_dir, "final"),
        "train_dc_mm": float(np.mean([r.dc_mm for r in train_reports])),
        "train_recall": float(np.mean([r.recall for r in train_reports])),
    }
    if val_captures:
        summary["best_checkpoint"] = os.path.join(cfg.out_dir, "best")
        summary["best_val_dc_mm"] = float(best_val)
        summary["best_epoch"] = best_epoch
        summary["final_val_dc_mm"] = history[-1]["val_dc_mm"]
        summary["final_val_recall"] = history[-1]["val_recall"]
    return summary


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------

def gradcheck_suite(scale: str = "tiny", seed: int = 0) -> dict:
    """Finite-difference checks for every network op plus the full loss
    pipeline; returns {check name: (max_rel_err, tolerance)}.

    Per-op checks run at the standard probe step h=1e-3; the end-to-end
    check uses h=1e-6 because probing a deep relu/batchnorm/nearest-
    neighbor chain with a wide step straddles decision boundaries that
    a derivative check must not average over.
    """
    rng = np.random.default_rng(seed)
    results = {}

    def add(name, build, params, h=1e-3, tol=1e-3, probes=16):
        rep = ndiff.gradcheck(build, params, h=h, probes_per_param=probes, seed=seed)
        results[name] = (rep.max_rel_err, tol)

    x = rng.normal(size=(4, 7))
    add("pointwise_mlp",
        lambda a: ndiff.sum_all(ndiff.pointwise_mlp(a["x"], a["w"], a["b"])),
        {"x": x, "w": rng.normal(size=(3, 4)), "b": rng.normal(size=3)})

    mix = rng.normal(size=(4, 7))
    def bn_train(a):
        st = ndiff.BatchNormState.create(4)
        out = ndiff.batchnorm1d(a["x"], a["g"], a["b"], st, training=True)
        return ndiff.sum_all(ndiff.elementwise_mul(out, ndiff.asdiff(mix.astype(out.data.dtype))))
    add("batchnorm1d_train", bn_train,
        {"x": x, "g": rng.normal(size=4) + 1.0, "b": rng.normal(size=4)})

    def bn_eval(a):
        st = ndiff.BatchNormState.create(4)
        st.running_mean = np.full(4, 0.3, dtype=np.float32)
        st.running_var = np.full(4, 1.7, dtype=np.float32)
        out = ndiff.batchnorm1d(a["x"], a["g"], a["b"], st, training=False)
        return ndiff.sum_all(ndiff.elementwise_mul(out, ndiff.asdiff(mix.astype(out.data.dtype))))
    add("batchnorm1d_eval", bn_eval,
        {"x": x, "g": rng.normal(size=4) + 1.0, "b": rng.normal(size=4)})

    add("relu", lambda a: ndiff.sum_all(ndiff.elementwise_mul(
        ndiff.relu(a["x"]), ndiff.asdiff(mix.astype(a["x"].data.dtype)))), {"x": x})
    add("sigmoid", lambda a: ndiff.sum_all(ndiff.elementwise_mul(
        ndiff.sigmoid(a["x"]), ndiff.asdiff(mix.astype(a["x"].data.dtype)))), {"x": x})
    add("maxpool_points",
        lambda a: ndiff.sum_all(ndiff.maxpool_points(a["x"])), {"x": rng.normal(size=(5, 9))})
    add("elementwise_mul",
        lambda a: ndiff.sum_all(ndiff.elementwise_mul(a["u"], a["v"])),
        {"u": rng.normal(size=(4, 5)), "v": rng.normal(size=(4, 5))})

    mix2 = rng.normal(size=(9, 6))
    def concat_tile(a):
        joined = ndiff.concat([ndiff.tile(a["v"], 3, axis=0), a["m"]], axis=0)
        return ndiff.sum_all(ndiff.elementwise_mul(joined, ndiff.asdiff(mix2.astype(a["v"].data.dtype))))
    add("concat_tile", concat_tile, {"v": rng.normal(size=6), "m": rng.normal(size=(6, 6))})

    mix3 = rng.normal(size=(8, 3))
    gidx = rng.integers(0, 5, size=8)
    add("gather_transpose",
        lambda a: ndiff.sum_all(ndiff.elementwise_mul(
            ndiff.transpose(ndiff.transpose(ndiff.gather_rows(a["x"], gidx))),
            ndiff.asdiff(mix3.astype(a["x"].data.dtype)))),
        {"x": rng.normal(size=(5, 3))})

    add("cross_normalize_dot",
        lambda a: ndiff.sum_all(ndiff.row_dot(
            ndiff.normalize_rows(ndiff.cross_rows(a["u"], a["v"])), a["w"])),
        {"u": rng.normal(size=(6, 3)), "v": rng.normal(size=(6, 3)),
         "w": rng.normal(size=(6, 3))})

    add("row_norms", lambda a: ndiff.sum_all(ndiff.row_norms(a["x"])),
        {"x": rng.normal(size=(7, 3)) + 0.5})

    proto1 = geom.icosphere(1, 1.0)
    topo1 = geom.MeshTopology(proto1.base.faces, proto1.base.n_vertices)
    bump = proto1.base.vertices + rng.normal(0, 0.05, proto1.base.vertices.shape)
    add("neighbor_mean_offset",
        lambda a: objective.laplacian_loss(objective.DiffMesh(a["v"], topo1)),
        {"v": bump}, probes=12)
    add("normal_consistency",
        lambda a: objective.normal_consistency(objective.DiffMesh(a["v"], topo1)),
        {"v": bump}, probes=12)
    gt_small = rng.normal(size=(40, 3))
    add("chamfer_loss",
        lambda a: objective.chamfer_loss(a["p"], gt_small),
        {"p": rng.normal(size=(25, 3))}, probes=12)

    # full pipeline at the requested scale
    cfg = ModelConfig.tiny() if scale == "tiny" else ModelConfig.small()
    base = Model.initialize(cfg, seed=0)
    prng = np.random.default_rng(3)
    pts = prng.normal(0, 0.03, (cfg.n_input, 3))
    gt = prng.normal(0, 0.04, (256, 3))
    lw = LossWeights()
    params = {k: v.data.copy() for k, v in base.params.items()}

    def pipeline(arrays):
        m = Model.initialize(cfg, seed=0).train()
        for k in m.params:
            m.params[k] = arrays[k]
        r = m.forward(pts)
        total, _ = overall_loss(r.coarse, r.fine, gt, lw)
        return total

    add("pipeline_overall_loss", pipeline, params, h=1e-6, tol=1e-2, probes=8)
    return results


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = TrainConfig.from_json_file(args.config)
    summary = run_training(cfg, quiet=args.quiet)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _load_input_cloud(args, n_input: int) -> PointCloud:
    if args.input:
        pts, cols, _ = geom.read_ply(args.input)
        cloud = PointCloud(pts, cols)
    else:
        capture = ingest.load_capture(args.capture)
        frames = (_parse_frames(args.frames) if args.frames
                  else list(range(capture.n_frames)))
        cloud = ingest.fuse(capture, frames)
    if len(cloud) == 0:
        raise EmptyInputError("input cloud is empty after masking")
    rng = np.random.default_rng(args.seed)
    return ingest.resample(cloud, n_input, rng)


def _parse_frames(spec: str) -> list:
    try:
        return [int(tok) for tok in spec.split(",") if tok.strip() != ""]
    except ValueError as e:
        raise ParameterError(f"bad --frames list {spec!r}: {e}") from e


def cmd_infer(args) -> int:
    mdl = Model(load_checkpoint(args.ckpt)).eval()
    cloud = _load_input_cloud(args, mdl.config.n_input)
    result = mdl.forward(cloud.points)
    coarse = result.coarse_cloud()
    fine = result.fine_cloud()
    geom.write_ply(args.out_coarse, coarse.points)
    geom.write_ply(args.out_fine, fine.points)
    geom.write_ply(args.out_mesh, fine.points, faces=mdl.fine_topology.faces)
    print(json.dumps({
        "coarse_points": len(coarse),
        "fine_points": len(fine),
        "mesh_faces": int(mdl.fine_topology.faces.shape[0]),
    }))
    return 0


def cmd_eval(args) -> int:
    for path in (args.pred, args.gt):
        if not os.path.exists(path):
            raise DataError(f"{path}: no such file")
    pred_pts, _, _ = geom.read_ply(args.pred)
    gt_pts, _, _ = geom.read_ply(args.gt)
    report = eval_metrics(pred_pts, gt_pts, tau_mm=args.tau, squared=args.squared)
    print(report.to_json())
    return 0


def cmd_fuse(args) -> int:
    capture = ingest.load_capture(args.capture)
    frames = _parse_frames(args.frames) if args.frames else list(range(capture.n_frames))
    cloud = ingest.fuse(capture, frames)
    geom.write_ply(args.out, cloud.points, colors=cloud.colors)
    print(json.dumps({"points": len(cloud), "frames": frames}))
    return 0


def cmd_make_proto(args) -> int:
    proto = geom.icosphere(args.level, args.radius)
    geom.write_ply(args.out, proto.base.vertices, faces=proto.base.faces)
    print(json.dumps({"vertices": proto.base.n_vertices, "faces": proto.base.n_faces}))
    return 0


def cmd_synth(args) -> int:
    def write(captures, root):
        os.makedirs(root, exist_ok=True)
        for i, cap in enumerate(captures):
            ingest.save_capture(cap, os.path.join(root, f"capture_{i:04d}"))
    if args.n_val > 0:
        write(ingest.gen_synthetic(args.seed, args.n), os.path.join(args.out, "train"))
        write(ingest.gen_synthetic(args.seed + 1_000_003, args.n_val),
              os.path.join(args.out, "val"))
    else:
        write(ingest.gen_synthetic(args.seed, args.n), args.out)
    print(json.dumps({"train": args.n, "val": args.n_val, "out": args.out}))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(scale=args.scale, seed=args.seed)
    worst_over = 0.0
    failed = []
    for name, (err, tol) in results.items():
        status = "ok" if err < tol else "FAIL"
        print(f"{name:28s} max rel err {err:10.3e}  (tol {tol:.0e})  {status}")
        if err >= tol:
            failed.append(name)
        worst_over = max(worst_over, err / tol)
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protoshape",
                description="Prototype-refining shape completion for fruit-like "
                            "objects observed as partial RGB-D views.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="complete a partial cloud with a checkpoint")
    i.add_argument("--ckpt", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="partial cloud PLY")
    src.add_argument("--capture", help="capture directory (back-projected internally)")
    i.add_argument("--frames", help="comma-separated frame indices (with --capture)")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out-coarse", required=True)
    i.add_argument("--out-fine", required=True)
    i.add_argument("--out-mesh", required=True)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="compare two clouds: Chamfer-mm and F-score")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, default=5.0, help="threshold in mm")
    e.add_argument("--squared", action="store_true",
                   help="report mean squared distances (mm^2) instead")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("fuse", help="fuse capture frames into one cloud")
    f.add_argument("--capture", required=True)
    f.add_argument("--frames")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fuse)

    m = sub.add_parser("make-proto", help="write an icosphere prototype mesh")
    m.add_argument("--level", type=int, required=True)
    m.add_argument("--radius", type=float, required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_make_proto)

    s = sub.add_parser("synth", help="generate synthetic captures")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-val", type=int, default=0,
                   help="also emit a validation split of this size")
    s.set_defaults(fn=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (DataError, CheckpointError, ParameterError, EmptyInputError,
            DimensionError, TopologyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ProtoshapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
