"""``shira`` command line.

Every subcommand writes into ``--out DIR``. Settings can also come from a
flat ``key=value`` file given with ``--config``; flags on the command line
win over the file. Exit codes: 0 success, 1 usage or file-format error,
2 numerical failure (diverged training, failed lemma check).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import ortho
from .errors import FormatError, NumericError, ParameterError, ShapeError
from .lemmas import verify_all
from .masks import MaskRecipe, build_mask, collect_gradients, density_to_k
from .model import (
    TrainConfig,
    evaluate,
    extract_adapters,
    fuse_loras,
    init_model,
    load_loras,
    load_model,
    make_teacher_task,
    save_loras,
    save_model,
    train_lora,
    train_shira,
)
from .rank import adapter_rank_report
from .store import apply, fuse_multi, load_all, load_masks, save, save_masks

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _float_list(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _str_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config(path):
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _task_args(p):
    g = p.add_argument_group("teacher task")
    g.add_argument("--task-seed", type=int, default=100)
    g.add_argument("--task-density", type=float, default=0.02)
    g.add_argument("--task-scale", type=float, default=0.5)
    g.add_argument("--task-tensor", choices=("W1", "W2"), default="W1")


def _model_args(p):
    g = p.add_argument_group("base model")
    g.add_argument("--model", help="base model .npz; a fresh one is drawn from --seed if absent")
    g.add_argument("--n-in", type=int, default=64)
    g.add_argument("--n-hidden", type=int, default=128)
    g.add_argument("--n-out", type=int, default=32)


def build_parser():
    parser = _Parser(prog="shira", description="Sparse high rank adapters on a toy model.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("build-mask", "build a trainable-weight mask")
    p.add_argument("--strategy", choices=("struct", "rand", "wm", "grad", "snip"), required=True)
    p.add_argument("--dim", type=int, help="square mask size")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--frequency", type=int, default=1)
    p.add_argument("--axis", choices=("rows", "cols"), default="rows")
    p.add_argument("--diagonal", type=_bool, nargs="?", const=True, default=True)
    p.add_argument("--no-diagonal", dest="diagonal", action="store_false")
    p.add_argument("--p", type=float, default=0.02, help="Bernoulli probability (rand)")
    p.add_argument("--density", type=float, default=0.02)
    p.add_argument("--weights", help=".npy matrix or model .npz (wm, snip)")
    p.add_argument("--tensor", default="W1", help="tensor name inside a model file")
    p.add_argument("--exclude", help="mask file whose positions are excluded")
    p.add_argument("--calib-batches", type=int, default=4)
    p.add_argument("--calib-size", type=int, default=256)
    p.add_argument("--name", help="tensor name stored in the mask file")
    _model_args(p)
    _task_args(p)

    p = command("train", "finetune a toy model with a SHiRA or LoRA adapter")
    p.add_argument("--adapter", choices=("shira", "lora"), default="shira")
    p.add_argument("--mask", help="mask file (index-only SHRA); tensors not listed are frozen")
    p.add_argument("--oracle-mask", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=8.0)
    p.add_argument("--scaling-rule", choices=("alpha_over_r", "alpha_over_sqrt_r", "unit"), default="alpha_over_r")
    p.add_argument("--targets", type=_str_list, default=["W1"])
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    _model_args(p)
    _task_args(p)

    p = command("extract", "store trained-minus-base weight differences as SHRA")
    p.add_argument("--base", required=True)
    p.add_argument("--trained", required=True)

    p = command("apply", "switch sparse adapters into a model: W + alpha * S")
    p.add_argument("--weights", required=True, help="model .npz or .npy matrix")
    p.add_argument("--adapter", required=True)
    p.add_argument("--alpha", type=float, default=1.0)

    p = command("fuse", "fuse several sparse adapters (or LoRA factor files) into a model")
    p.add_argument("--weights", required=True)
    p.add_argument("--adapters", type=_str_list, default=[])
    p.add_argument("--alphas", type=_float_list)
    p.add_argument("--loras", type=_str_list, default=[])

    p = command("ortho", "AWOM / AWOR of random adapter pairs")
    p.add_argument("--dims", type=_int_list, default=[256, 1024, 4096])
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--sparsity", type=float, default=0.99)
    p.add_argument("--norm", choices=("fro", "spectral"), default="fro")
    p.add_argument("--eps", type=float, default=ortho.DEFAULT_EPS)

    command("verify-lemmas", "numerical checks of the adapter lemmas")

    p = command("bench-switch", "time sparse overwrite against dense LoRA fusion")
    p.add_argument("--dims", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--density", type=float, default=0.01)
    p.add_argument("--rank", type=int, default=64)
    p.add_argument("--repeats", type=int, default=50)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse ``argv``, folding in ``--config`` values underneath the flags."""
    parser = build_parser()
    path = _config_path(argv)
    if path and argv and not argv[0].startswith("-"):
        try:
            sub = _subparser(parser, argv[0])
        except KeyError:
            raise UsageError(f"unknown command {argv[0]!r}") from None
        actions = {}
        for a in sub._actions:
            if a.dest not in ("help", "config"):
                actions.setdefault(a.dest, a)
        for key, raw in read_config(_require(path, "config")).items():
            if key not in actions:
                raise UsageError(f"unknown config key {key!r} for {argv[0]}")
            action = actions[key]
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config key {key}: {value!r} not in {sorted(action.choices)}")
            action.default = value
            action.required = False
    return parser.parse_args(argv)


# helpers


def _require(path, what):
    if path is None or not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _load_weights(path):
    """A model (``.npz``) or a bare matrix (``.npy``)."""
    _require(path, "weights")
    if path.endswith(".npy"):
        return np.load(path, allow_pickle=False)
    return load_model(path)


def _base_model(args):
    if args.model:
        return load_model(_require(args.model, "model"))
    return init_model(args.n_in, args.n_hidden, args.n_out, seed=args.seed)


def _task(args, base):
    return make_teacher_task(base, args.task_density, args.task_scale, args.task_tensor, args.task_seed)


def _dims(args):
    rows = args.rows or args.dim
    cols = args.cols or args.dim
    if not rows or not cols:
        raise UsageError("give --dim or both --rows and --cols")
    return rows, cols


# subcommands


def cmd_build_mask(args):
    exclude = frozenset()
    if args.exclude:
        exclude = frozenset(next(iter(load_masks(_require(args.exclude, "exclude mask")).values())).indices().tolist())
    recipe = MaskRecipe(
        args.strategy, args.density, args.frequency, args.axis, args.diagonal, args.p, args.seed, exclude
    )
    weights = grads = None
    name = args.name or args.tensor
    if args.strategy == "wm" and not args.weights:
        raise UsageError("--strategy wm needs --weights")
    if args.weights:
        loaded = _load_weights(args.weights)
        weights = loaded if isinstance(loaded, np.ndarray) else getattr(loaded, args.tensor)
    if args.strategy in ("grad", "snip"):
        base = _base_model(args)
        task = _task(args, base)
        rng = np.random.default_rng(args.seed + 500)
        batches = [task.sample(args.calib_size, rng) for _ in range(args.calib_batches)]
        grads = collect_gradients(base, batches)[args.tensor]
        if weights is None and args.strategy == "snip":
            weights = getattr(base, args.tensor)
    shape = None if (weights is not None or grads is not None) else _dims(args)
    mask = build_mask(recipe, shape=shape, weights=weights, grads=grads)
    path = os.path.join(args.out, "mask.shra")
    save_masks({name: mask}, path)
    rep = adapter_rank_report(mask, seed=args.seed)
    print(f"mask {mask.rows}x{mask.cols} count={mask.count} density={mask.density:.6g} rank={rep.numeric_rank}")
    if args.strategy in ("wm", "grad", "snip"):
        print(f"k={density_to_k(mask.rows, mask.cols, args.density)}")
    if mask.warning:
        print(f"warning: {mask.warning}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args):
    base = _base_model(args)
    task = _task(args, base)
    config = TrainConfig(
        learning_rate=args.lr, steps=args.steps, batch_size=args.batch_size, optimizer=args.optimizer, seed=args.seed
    )
    save_model(base, os.path.join(args.out, "base.npz"))
    if args.adapter == "lora":
        loras, log = train_lora(base, args.targets, args.rank, args.alpha, args.scaling_rule, config, task)
        trained = fuse_loras(base, loras)
        adapter_path = os.path.join(args.out, "lora.npz")
        save_loras(loras, adapter_path)
    else:
        if args.oracle_mask:
            masks = task.support_masks()
        elif args.mask:
            masks = load_masks(_require(args.mask, "mask"))
        else:
            raise UsageError("SHiRA training needs --mask or --oracle-mask")
        trained, log = train_shira(base, masks, task, config)
        adapter_path = os.path.join(args.out, "adapter.shra")
        adapters = extract_adapters(trained, base)
        save(list(adapters.values()), adapter_path)
    save_model(trained, os.path.join(args.out, "trained.npz"))
    log.to_csv(os.path.join(args.out, "train_log.csv"))
    print(f"initial_mse={evaluate(base, task):.6g}")
    print(f"heldout_mse={evaluate(trained, task):.6g}")
    print(f"wrote {adapter_path}")
    return EXIT_OK


def cmd_extract(args):
    base = load_model(_require(args.base, "base model"))
    trained = load_model(_require(args.trained, "trained model"))
    adapters = extract_adapters(trained, base)
    path = os.path.join(args.out, "adapter.shra")
    save(list(adapters.values()), path)
    for a in adapters.values():
        print(f"{a.name} {a.rows}x{a.cols} nnz={a.nnz} density={a.density:.6g}")
    print(f"wrote {path}")
    return EXIT_OK


def _write_like(obj, src_path, out_dir):
    name = os.path.basename(src_path)
    path = os.path.join(out_dir, name)
    if isinstance(obj, np.ndarray):
        np.save(path, obj, allow_pickle=False)
    else:
        save_model(obj, path)
    return path


def _switch_in(target, pairs):
    """Fuse ``[(adapter, alpha)]`` into a matrix or a model; returns (result, reports)."""
    if isinstance(target, np.ndarray):
        out, report = fuse_multi(target, pairs)
        return out, [report]
    by_name = {}
    for a, alpha in pairs:
        by_name.setdefault(a.name, []).append((a, alpha))
    weights, reports = {}, []
    for name, group in by_name.items():
        if not hasattr(target, name):
            raise ShapeError(f"model has no tensor {name!r}")
        weights[name], report = fuse_multi(getattr(target, name), group)
        reports.append(report)
    return target.with_weights(**weights), reports


def cmd_apply(args):
    target = _load_weights(args.weights)
    adapters = load_all(_require(args.adapter, "adapter"))
    if isinstance(target, np.ndarray):
        if len(adapters) != 1:
            raise UsageError("a bare matrix takes exactly one adapter tensor")
        result = apply(target, adapters[0], args.alpha)
    else:
        weights = {}
        for a in adapters:
            if not hasattr(target, a.name):
                raise ShapeError(f"model has no tensor {a.name!r}")
            weights[a.name] = apply(weights.get(a.name, getattr(target, a.name)), a, args.alpha)
        result = target.with_weights(**weights)
    path = _write_like(result, args.weights, args.out)
    print(f"alpha={args.alpha} touched={sum(a.nnz for a in adapters)}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_fuse(args):
    target = _load_weights(args.weights)
    if not args.adapters and not args.loras:
        raise UsageError("give --adapters and/or --loras")
    alphas = args.alphas or [1.0] * len(args.adapters)
    if len(alphas) != len(args.adapters):
        raise UsageError("--alphas must match --adapters in length")
    pairs = []
    for path, alpha in zip(args.adapters, alphas):
        pairs += [(a, alpha) for a in load_all(_require(path, "adapter"))]
    result = target
    if pairs:
        result, reports = _switch_in(target, pairs)
        for r in reports:
            print(f"touched={r.touched} overlap={r.total_overlap}")
    for path in args.loras:
        if isinstance(result, np.ndarray):
            raise UsageError("LoRA factor files need a model, not a bare matrix")
        result = fuse_loras(result, load_loras(_require(path, "LoRA")))
    path = _write_like(result, args.weights, args.out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ortho(args):
    if not 0.0 <= args.sparsity < 1.0:
        raise UsageError("--sparsity must lie in [0, 1)")
    styles = [ortho.AdapterStyle(s, args.sparsity) for s in ortho.STYLES]
    fig = ortho.simulate_fig4(args.dims, styles, args.trials, args.seed, args.eps, args.norm)
    wm = ortho.simulate_wm_overlap(args.dims, args.trials, args.sparsity, args.seed, args.eps, args.norm)
    p1 = os.path.join(args.out, "ortho.csv")
    p2 = os.path.join(args.out, "wm_overlap.csv")
    fig.to_csv(p1)
    wm.to_csv(p2)
    for r in fig.rows + wm.rows:
        print(f"{r.dim} {r.style} {r.overlap_mode} awom={r.awom_mean:.6g} awor={r.awor_mean:.6g}")
    print(f"wrote {p1}")
    print(f"wrote {p2}")
    return EXIT_OK


def cmd_verify_lemmas(args):
    results = verify_all(args.seed)
    with open(os.path.join(args.out, "lemmas.txt"), "w", encoding="utf-8") as fh:
        for r in results:
            print(r.line())
            fh.write(r.line() + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_bench_switch(args):
    report = bench_mod.bench(args.dims, args.density, args.rank, args.repeats, args.seed)
    path = os.path.join(args.out, "bench.csv")
    report.to_csv(path)
    for r in report.rows:
        print(f"{r.dim} fuse={r.t_fuse_mean:.3e}s scatter={r.t_scatter_mean:.3e}s speedup={r.speedup}")
    for w in report.warnings:
        print(f"warning: {w}")
    print(f"pinned={report.pinned}")
    print(f"wrote {path}")
    return EXIT_OK


_PATH_FLAGS = ("model", "mask", "weights", "exclude", "base", "trained")
_PATH_LIST_FLAGS = ("adapters", "loras")


def validate_paths(args):
    """Fail before any work if an input file named on the command line is missing."""
    for flag in _PATH_FLAGS:
        value = getattr(args, flag, None)
        if value:
            _require(value, flag)
    if args.command == "apply":
        _require(args.adapter, "adapter")
    for flag in _PATH_LIST_FLAGS:
        for value in getattr(args, flag, None) or ():
            _require(value, flag)


COMMANDS = {
    "build-mask": cmd_build_mask,
    "train": cmd_train,
    "extract": cmd_extract,
    "apply": cmd_apply,
    "fuse": cmd_fuse,
    "ortho": cmd_ortho,
    "verify-lemmas": cmd_verify_lemmas,
    "bench-switch": cmd_bench_switch,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        validate_paths(args)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ParameterError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
