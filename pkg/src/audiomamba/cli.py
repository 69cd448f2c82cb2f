"""Command-line entry point: train / eval / infer / params / bench / gradcheck.

Exit codes are a stable contract: 0 success, 1 usage or config problem,
2 data problem, 3 verification failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import backbone, checkpoint as ckpt, frontend, metrics, scan, training
from . import tensor as T
from .backbone import AudioMambaModel
from .config import (ConfigError, ModelConfig, TrainConfig, apply_overrides,
                     dump_config, load_config, model_config)
from .gradcheck import check_gradients
from .tensor import Tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


def worker_count() -> int:
    """Data-loading worker cap, overridable via AUDIOMAMBA_THREADS."""
    n = os.cpu_count() or 1
    env = os.environ.get("AUDIOMAMBA_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise ConfigError(f"AUDIOMAMBA_THREADS must be an integer, got '{env}'")
    return n


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the usage code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")

    p = _Parser(prog="audiomamba", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("train", parents=[common], help="run the training loop")
    pt.add_argument("--manifest", required=True)
    pt.add_argument("--eval-manifest", default=None)
    pt.add_argument("--checkpoint", default=None, help="resume from a saved state")

    pe = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    pe.add_argument("--manifest", required=True)
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--mode", choices=("multilabel", "singlelabel"), default="multilabel")
    pe.add_argument("--skip-unreadable", action="store_true")

    pi = sub.add_parser("infer", parents=[common], help="score clips from a manifest")
    pi.add_argument("--manifest", required=True)
    pi.add_argument("--checkpoint", required=True)
    pi.add_argument("--mode", choices=("multilabel", "singlelabel"), default="multilabel")
    pi.add_argument("--top-k", type=int, default=5)

    sub.add_parser("params", parents=[common], help="print parameter counts")

    pb = sub.add_parser("bench", parents=[common],
                        help="time the scan against naive attention")
    pb.add_argument("--lengths", default="1024,2048,4096",
                    help="comma-separated sequence lengths, ascending")
    pb.add_argument("--width", type=int, default=64, help="channel width for both sides")
    pb.add_argument("--repeats", type=int, default=3)

    pg = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference verification at toy shapes")
    pg.add_argument("scope", choices=("scan", "ss2d", "block", "model"))
    pg.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    return p


def _resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    pairs = {}
    variant = None
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got '{item}'")
        if key.strip() == "model.variant":
            variant = value.strip()
        else:
            pairs[key.strip()] = value.strip()
    if variant:
        model_cfg = model_config(variant)
    model_cfg, train_cfg = apply_overrides(model_cfg, train_cfg, pairs)
    if args.seed is not None:
        from dataclasses import replace
        train_cfg = replace(train_cfg, seed=args.seed)
    return model_cfg, train_cfg


def _echo_config(model_cfg, train_cfg, out_dir: Optional[str], log_fh=None):
    text = dump_config(model_cfg, train_cfg)
    if out_dir:
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
    if log_fh is not None:
        for line in text.splitlines():
            log_fh.write(f"# {line}\n")


def _parallel_loader(base_loader, manifest, skip_unreadable=False):
    """Decode all clips up front on a capped thread pool, keeping manifest
    order; returns a dict-backed loader for the evaluate path."""
    cache = {}

    def fetch(row):
        try:
            return row.path, base_loader(row.path)
        except (OSError, ValueError) as e:
            return row.path, e

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for path, result in pool.map(fetch, manifest.rows):
            cache[path] = result

    def load(path):
        result = cache[path]
        if isinstance(result, Exception):
            raise result
        return result

    return load


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    if not args.out:
        raise ConfigError("train requires --out for checkpoints and logs")
    os.makedirs(args.out, exist_ok=True)
    manifest = training.load_manifest(args.manifest, model_cfg.n_classes, split="train")
    eval_manifest = None
    if args.eval_manifest:
        eval_manifest = training.load_manifest(args.eval_manifest, model_cfg.n_classes,
                                               split="eval")
    model = AudioMambaModel(model_cfg, seed=train_cfg.seed)
    optimizer = training.AdamW(model.named_parameters(), lr=train_cfg.learning_rate,
                               weight_decay=train_cfg.weight_decay)
    start_step = 0
    if args.checkpoint:
        start_step = training.load_training_state(model, optimizer, args.checkpoint)
        print(f"resumed from {args.checkpoint} at step {start_step}")
    with open(os.path.join(args.out, "run.log"), "a", encoding="utf-8") as log_fh:
        _echo_config(model_cfg, train_cfg, args.out, log_fh)
        result = training.train_loop(
            model, manifest, train_cfg, args.out, eval_manifest=eval_manifest,
            log_fn=lambda line: (log_fh.write(line + "\n"), print(line)),
            start_step=start_step, optimizer=optimizer)
    if result.best_checkpoint:
        print(f"best mAP {result.best_map:.6f} -> {result.best_checkpoint}")
    print(f"ran {result.steps_run - start_step} steps; "
          f"state in {os.path.join(args.out, 'last.amba')}")
    return EXIT_OK


def _model_from_checkpoint(args, model_cfg) -> AudioMambaModel:
    model = AudioMambaModel(model_cfg, seed=0)
    model.load_checkpoint(args.checkpoint, "strict")
    return model


def _ap_figure(report, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    aps = np.nan_to_num(np.asarray(report.per_class_ap, dtype=np.float64))
    fig, ax = plt.subplots(figsize=(max(4.0, min(12.0, len(aps) * 0.25)), 3))
    ax.bar(range(len(aps)), aps, color="#4477aa")
    ax.axhline(report.mAP, color="#cc6677", linestyle="--", label=f"mAP {report.mAP:.3f}")
    ax.set_xlabel("class")
    ax.set_ylabel("average precision")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_eval(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    model = _model_from_checkpoint(args, model_cfg)
    manifest = training.load_manifest(args.manifest, model_cfg.n_classes, split="eval")
    loader = _parallel_loader(training.default_feature_loader(model_cfg), manifest)
    report = training.evaluate(model, manifest, mode=args.mode, feature_loader=loader,
                               skip_unreadable=args.skip_unreadable)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _echo_config(model_cfg, train_cfg, args.out)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        _ap_figure(report, os.path.join(args.out, "per_class_ap.png"))
    return EXIT_OK


def cmd_infer(args) -> int:
    model_cfg, train_cfg = _resolve_configs(args)
    model = _model_from_checkpoint(args, model_cfg)
    manifest = training.load_manifest(args.manifest, model_cfg.n_classes, split="eval")
    loader = _parallel_loader(training.default_feature_loader(model_cfg), manifest)
    lines = ["path,predictions"]
    for row in manifest.rows:
        with T.no_grad():
            logits = model.forward_grid(loader(row.path)).data.astype(np.float64)
        probs = 1.0 / (1.0 + np.exp(-logits))
        if args.mode == "singlelabel":
            c = int(np.argmax(logits))
            preds = f"{c}:{probs[c]:.6f}"
        else:
            top = np.argsort(-probs, kind="stable")[:args.top_k]
            preds = ";".join(f"{int(c)}:{probs[c]:.6f}" for c in top)
        lines.append(f"{row.path},{preds}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _echo_config(model_cfg, train_cfg, args.out)
        with open(os.path.join(args.out, "predictions.csv"), "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_params(args) -> int:
    model_cfg, _ = _resolve_configs(args)
    breakdown = backbone.param_breakdown(model_cfg)
    total = backbone.count_params(model_cfg)
    print(f"variant {model_cfg.variant}")
    for name, count in breakdown.items():
        print(f"{name} {count}")
    print(f"total {total}")
    assert sum(breakdown.values()) == total
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _time_best(fn, repeats: int, min_span: float = 0.05) -> float:
    """Best-of-N timing; short workloads are looped so each measurement spans
    at least min_span seconds."""
    t0 = time.perf_counter()
    fn()  # warmup outside the timed region
    est = time.perf_counter() - t0
    inner = max(1, int(math.ceil(min_span / max(est, 1e-9))))
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def _naive_attention(x, wq, wk, wv, block=256):
    """Full quadratic attention, materialized in row blocks so the score
    matrix stays cache-resident at every L."""
    d = x.shape[1]
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.empty_like(q)
    for i in range(0, x.shape[0], block):
        s = (q[i:i + block] @ k.T) / math.sqrt(d)
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        out[i:i + block] = p @ v
    return out


def run_bench(lengths, width=64, repeats=3, state_size=16, chunk=scan.DEFAULT_CHUNK):
    """Forward-only timing of the chunked scan vs naive self-attention at
    matched channel width. Returns [(L, scan_time, attention_time)]."""
    if list(lengths) != sorted(lengths):
        raise ConfigError("bench lengths must be ascending")
    rng = np.random.default_rng(0)
    params = scan.init_scan_params(rng, width, state_size)
    wq, wk, wv = (rng.standard_normal((width, width)).astype(np.float32) / math.sqrt(width)
                  for _ in range(3))
    rows = []
    for L in lengths:
        x = rng.standard_normal((L, width)).astype(np.float32)
        t_scan = _time_best(lambda: scan.scan_chunked(params, x, chunk=chunk), repeats)
        t_attn = _time_best(lambda: _naive_attention(x, wq, wk, wv), repeats)
        rows.append((L, t_scan, t_attn))
    return rows


def _bench_figure(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    Ls = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(Ls, [r[1] for r in rows], "o-", label="selective scan")
    ax.plot(Ls, [r[2] for r in rows], "s-", label="naive attention")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("forward time (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_bench(args) -> int:
    model_cfg, _ = _resolve_configs(args)
    try:
        lengths = [int(tok) for tok in args.lengths.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--lengths expects comma-separated integers, got '{args.lengths}'")
    if not lengths:
        raise ConfigError("--lengths is empty")
    rows = run_bench(lengths, width=args.width, repeats=args.repeats,
                     state_size=model_cfg.state_size, chunk=model_cfg.scan_chunk)
    lines = ["L,scan_time,attention_time"]
    lines += [f"{L},{ts:.6f},{ta:.6f}" for L, ts, ta in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w", encoding="utf-8") as fh:
            fh.write(text)
        _bench_figure(rows, os.path.join(args.out, "bench.png"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def _gradcheck_scan(corrupt):
    rng = np.random.default_rng(0)
    params = scan.init_scan_params(rng, 2, 2, dtype=np.float64)
    x = Tensor(rng.standard_normal((8, 2)), requires_grad=True, dtype=np.float64)

    def fn():
        y = scan.selective_scan_forward(params, x, chunk=4)
        return T.tsum(T.mul(y, y))

    return check_gradients(fn, params.parameters() + [x], corrupt=corrupt)


def _gradcheck_ss2d(corrupt):
    rng = np.random.default_rng(1)
    params = [scan.init_scan_params(rng, 2, 2, dtype=np.float64) for _ in range(4)]
    f = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True, dtype=np.float64)

    def fn():
        y = scan.ss2d_forward(params, f, chunk=4)
        return T.tsum(T.mul(y, y))

    tensors = [p for ps in params for p in ps.parameters()] + [f]
    return check_gradients(fn, tensors, corrupt=corrupt)


def _gradcheck_block(corrupt):
    rng = np.random.default_rng(2)
    blk = backbone.SSBlock(rng, 4, 2, expand=2, conv_kernel=3, chunk=4,
                           drop_path=0.0, dtype=np.float64)
    f = Tensor(rng.standard_normal((4, 4, 4)), requires_grad=True, dtype=np.float64)

    def fn():
        return T.tsum(T.mul(blk(f), f))

    tensors = list(blk.params().values()) + [f]
    return check_gradients(fn, tensors, corrupt=corrupt, h=1e-6)


def _gradcheck_model(corrupt):
    """End-to-end chain through a model with two populated stages, checking a
    representative parameter from each module kind."""
    cfg = ModelConfig(variant="nano", dims=(4, 8, 16, 32), depths=(1, 1, 0, 0),
                      state_size=2, n_classes=3, input_frames=64, n_mels=16,
                      n_windows=2, drop_path_rate=0.0, scan_chunk=8)
    model = AudioMambaModel(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    grid = Tensor(rng.standard_normal((1, 32, 32)), requires_grad=True, dtype=np.float64)
    targets = np.array([1.0, 0.0, 1.0])

    def fn():
        logits = model.forward_grid(grid)
        return training.bce_loss(T.reshape(logits, (1, 3)), targets[None])

    named = model.named_parameters()
    picks = ["patch_embed.proj.w", "stages.0.0.ssm.0.A_log", "stages.0.0.ssm.1.delta_bias",
             "stages.1.0.conv.w", "merges.1.reduce.w", "final_norm.gamma", "head.w"]
    chosen = [named[name] for name in picks if name in named]
    if len(chosen) < 5:
        raise AssertionError(f"expected named parameters missing; have {sorted(named)[:10]}")
    return check_gradients(fn, chosen + [grid], corrupt=corrupt, h=1e-6)


_GRADCHECK = {"scan": _gradcheck_scan, "ss2d": _gradcheck_ss2d,
              "block": _gradcheck_block, "model": _gradcheck_model}


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    try:
        errors = _GRADCHECK[args.scope](args.corrupt)
    except AssertionError as e:
        print(f"gradcheck {args.scope} FAIL: {e}")
        return EXIT_VERIFY
    worst = max(errors.values()) if errors else 0.0
    print(f"gradcheck {args.scope} ok: {len(errors)} tensors, "
          f"max rel err {worst:.3e}, {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
             "params": cmd_params, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, T.UsageError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (training.DataError, frontend.WavDecodeError,
            ckpt.CheckpointFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (AssertionError, FloatingPointError) as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
