"""Command-line entry point: ``tatl <command> [flags]``.

Commands: synth, train, eval, bound, crossval, ablate. Global flags
``--seed``, ``--out-dir`` and ``--config`` are accepted by every command;
values from the JSON config act as defaults that explicit flags override.
Exit codes: 0 success, 2 usage error, 3 data or runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import PRESETS, GenConfig, generate, load, save, stack
from .errors import TatlError
from .losses import LossConfig
from .maskops import ATTRIBUTES, binarize
from .metrics import dice, jaccard, summarize
from .nnet import MERGE_MODES, NetConfig, infer_config, init_params, load_weights, save_weights
from .stability import BoundInputs, compare_inits
from .training import OPT_MODES, OptConfig, TrainPlan, make_folds, predict_probs, run_pipeline

log = logging.getLogger("tatl")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 2, 3


class UsageError(Exception):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _attr_list(text) -> tuple[str, ...]:
    items = list(text) if isinstance(text, (list, tuple)) else [v.strip() for v in str(text).split(",") if v.strip()]
    bad = [a for a in items if a not in ATTRIBUTES]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"attributes must be drawn from {','.join(ATTRIBUTES)}")
    return tuple(items)


# -- argument parsing -----------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")
    p.add_argument("--log-level", default="WARNING")
    return p


def _net_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--merge", choices=MERGE_MODES, default="concat")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--stages", type=_int_list, default=(1, 2, 3))
    p.add_argument("--attributes", type=_attr_list, default=ATTRIBUTES)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--offset", type=int, default=40)
    p.add_argument("--opt", choices=OPT_MODES, default="momentum")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--c", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=4)
    _net_flags(p)


def build_parser(config: dict | None = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tatl", description="Transfer learning from union-mask pretexts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="isic2018")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.04)

    p = sub.add_parser("train", parents=[common], help="run training stages")
    _train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score trained weights fold by fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights-dir", required=True)
    p.add_argument("--ensemble", metavar="WEIGHTS_DIR", help="second weights directory to average with")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--attributes", type=_attr_list, default=ATTRIBUTES)
    p.add_argument("--offset", type=int, help="crop offset (defaults to the one used in training)")

    p = sub.add_parser("bound", parents=[common], help="compare candidate initialisations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--attribute", choices=ATTRIBUTES, default="S")
    p.add_argument("--init", action="append", default=[], metavar="NAME=PATH",
                   help="candidate weights; PATH 'random' draws a fresh initialisation")
    p.add_argument("--c", type=float, default=0.01)
    p.add_argument("--power-iters", type=int, default=20)
    p.add_argument("--power-tol", type=float, default=1e-3)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--samples", type=int, help="use only the first N samples")
    _net_flags(p)

    p = sub.add_parser("crossval", parents=[common], help="k-fold train and evaluate")
    _train_flags(p)
    p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("ablate", parents=[common], help="crop-offset ablation")
    _train_flags(p)
    p.add_argument("--offsets", type=_int_list, default=(0, 20, 40, 60))
    p.add_argument("--test-manifest", help="held-out dataset; defaults to fold 0 of --folds")
    p.add_argument("--folds", type=int, default=5)

    if config:
        for action in sub.choices.values():
            known = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in config.items() if k in known})
    return parser


def _read_config(argv: list[str]) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    ns, _ = pre.parse_known_args(argv)
    if not ns.config:
        return {}
    try:
        raw = json.loads(Path(ns.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {ns.config}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    out = {k.lstrip("-").replace("-", "_"): v for k, v in raw.items()}
    for key, conv in (("stages", _int_list), ("offsets", _int_list), ("attributes", _attr_list)):
        if key in out:
            out[key] = conv(out[key])
    return out


def _resolved(args) -> dict:
    doc = {k: v for k, v in vars(args).items() if k not in ("config", "log_level")}
    return json.loads(json.dumps(doc, default=list))


# -- helpers --------------------------------------------------------------

def _plan(args, offset: int | None = None) -> TrainPlan:
    opt = OptConfig(mode=args.opt, learning_rate=args.lr, momentum=args.momentum, c=args.c,
                    max_epochs=args.epochs, patience=args.patience, batch_size=args.batch_size, seed=args.seed)
    net = NetConfig(depth=args.depth, base_channels=args.base_channels, merge_mode=args.merge, seed=args.seed)
    return TrainPlan(stages=args.stages, freeze_encoder=args.freeze_encoder, attributes=args.attributes,
                     crop_offset=args.offset if offset is None else offset, opt=opt, net=net, loss=LossConfig())


def _check_size(samples, plan: TrainPlan) -> None:
    h, w = samples[0].masks.shape
    plan.net.check_input(np.empty((1, plan.net.in_channels, h, w)))


def _save_result(result, out: Path) -> dict:
    wdir = out / "weights"
    wdir.mkdir(parents=True, exist_ok=True)
    files = {}
    if result.segnet is not None:
        save_weights(wdir / "segnet.tatlw", result.segnet)
        files["segnet"] = "weights/segnet.tatlw"
    if result.pretext is not None:
        save_weights(wdir / "W_U.tatlw", result.pretext)
        files["W_U"] = "weights/W_U.tatlw"
    for a, params in result.attribute_params.items():
        save_weights(wdir / f"W_{a}.tatlw", params)
        files[f"W_{a}"] = f"weights/W_{a}.tatlw"
    return files


def _run_doc(args, result, files) -> dict:
    checks = {}
    for name, params in (("segnet", result.segnet), ("W_U", result.pretext)):
        if params is not None:
            checks[name] = {"all": params.checksum(), "encoder": params.checksum("encoder")}
    for a, params in result.attribute_params.items():
        checks[f"W_{a}"] = {"all": params.checksum(), "encoder": params.checksum("encoder")}
    return {
        "command": args.command,
        "config": _resolved(args),
        "plan": result.plan.to_dict(),
        "weights": files,
        "checksums": checks,
        "histories": {k: h.to_dict() for k, h in result.histories.items()},
        "crop_boxes": {k: list(b) for k, b in result.boxes.items()},
    }


def _score(samples, members_by_attr, segnet, offset) -> list[tuple[str, int, float, float]]:
    """Per-sample (attribute, sample index, dice, jaccard)."""
    rows = []
    for a, members in members_by_attr.items():
        probs = predict_probs(samples, members, segnet=segnet, offset=offset)
        for i, (p, s) in enumerate(zip(probs, samples)):
            pred = binarize(np.clip(p, 0.0, 1.0))
            rows.append((a, i, dice(pred, s.target(a)), jaccard(pred, s.target(a))))
    return rows


def _by_fold(rows, folds) -> list[tuple[str, int, float, float]]:
    fold_of = {int(i): k for k, f in enumerate(folds) for i in f}
    return [(a, fold_of[i], d, j) for a, i, d, j in rows]


def _load_dir(wdir: Path, attributes):
    run_path = wdir / "run.json"
    run = json.loads(run_path.read_text(encoding="utf-8")) if run_path.exists() else {}
    members = {}
    for a in attributes:
        params = load_weights(wdir / "weights" / f"W_{a}.tatlw")
        members[a] = (params, infer_config(params))
    segnet = None
    if (wdir / "weights" / "segnet.tatlw").exists():
        params = load_weights(wdir / "weights" / "segnet.tatlw")
        segnet = (params, infer_config(params))
    return members, segnet, run.get("plan", {}).get("crop_offset", 40)


# -- commands -------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    cfg = GenConfig(n_samples=args.n, image_size=args.size, preset=args.preset, noise=args.noise, seed=args.seed)
    samples = generate(cfg)
    save(samples, out)
    _write_json(out / "synth.json", {"command": "synth", "config": _resolved(args), "generator": asdict(cfg)})
    print(f"wrote {len(samples)} samples to {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out_dir)
    samples = load(args.manifest)
    plan = _plan(args)
    _check_size(samples, plan)
    result = run_pipeline(samples, plan)
    files = _save_result(result, out)
    _write_json(out / "run.json", _run_doc(args, result, files))
    print(f"trained {', '.join(files)} into {out / 'weights'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out_dir)
    samples = load(args.manifest)
    members, segnet, offset = _load_dir(Path(args.weights_dir), args.attributes)
    if args.ensemble:
        second, _, _ = _load_dir(Path(args.ensemble), args.attributes)
        members = {a: [members[a], second[a]] for a in args.attributes}
    else:
        members = {a: [m] for a, m in members.items()}
    if args.offset is not None:
        offset = args.offset
    folds = make_folds(len(samples), args.folds, args.seed)
    rows = _by_fold(_score(samples, members, segnet, offset), folds)
    summary = summarize(rows)
    summary.write_csv(out / "metrics.csv")
    fold_lines = ["attribute,fold,n,dice_mean,jaccard_mean"]
    for a, means in summary.fold_means.items():
        for k, (d, j) in enumerate(means):
            fold_lines.append(f"{a},{k},{len(folds[k])},{d:.6f},{j:.6f}")
    _write_text(out / "folds.csv", "\n".join(fold_lines) + "\n")
    _write_json(out / "eval.json", {"command": "eval", "config": _resolved(args), "crop_offset": offset})
    print(summary.to_csv(), end="")
    return EXIT_OK


def cmd_bound(args) -> int:
    if not args.init:
        raise UsageError("bound needs at least one --init NAME=PATH")
    out = Path(args.out_dir)
    samples = load(args.manifest)
    if args.samples is not None:
        samples = samples[:args.samples]
    candidates = {}
    for spec in args.init:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--init expects NAME=PATH, got {spec!r}")
        if path == "random":
            net = NetConfig(depth=args.depth, base_channels=args.base_channels, merge_mode=args.merge, seed=args.seed)
            candidates[name] = init_params(net)
        else:
            candidates[name] = load_weights(path)
    x, y = stack(samples, args.attribute)
    inputs = BoundInputs(c=args.c, K=len(candidates), power_iters=args.power_iters, power_tol=args.power_tol,
                         fd_step=args.fd_step, seed=args.seed)
    report = compare_inits(candidates, x, y, inputs)
    doc = json.loads(report.to_json())
    doc["config"] = _resolved(args)
    _write_json(out / "bound.json", doc)
    print(report.to_json())
    return EXIT_OK


def cmd_crossval(args) -> int:
    out = Path(args.out_dir)
    samples = load(args.manifest)
    plan = _plan(args)
    _check_size(samples, plan)
    folds = make_folds(len(samples), args.folds, args.seed)
    rows = []
    for k, test_idx in enumerate(folds):
        held = set(test_idx.tolist())
        train = [s for i, s in enumerate(samples) if i not in held]
        test = [samples[i] for i in test_idx]
        result = run_pipeline(train, plan)
        members = {a: [(w, plan.net)] for a, w in result.attribute_params.items()}
        segnet = (result.segnet, plan.segnet_config()) if result.segnet is not None else None
        rows += [(a, k, d, j) for a, _, d, j in _score(test, members, segnet, plan.crop_offset)]
        log.info("fold %d done", k)
    summary = summarize(rows)
    summary.write_csv(out / "metrics.csv")
    _write_json(out / "crossval.json", {"command": "crossval", "config": _resolved(args),
                                        "folds": [f.tolist() for f in folds]})
    print(summary.to_csv(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out_dir)
    samples = load(args.manifest)
    if args.test_manifest:
        train, test = samples, load(args.test_manifest)
    else:
        folds = make_folds(len(samples), args.folds, args.seed)
        held = set(folds[0].tolist())
        train = [s for i, s in enumerate(samples) if i not in held]
        test = [samples[i] for i in folds[0]]
    lines = ["offset,attribute,dice_mean,jaccard_mean"]
    for offset in args.offsets:
        plan = _plan(args, offset)
        _check_size(samples, plan)
        result = run_pipeline(train, plan)
        members = {a: [(w, plan.net)] for a, w in result.attribute_params.items()}
        segnet = (result.segnet, plan.segnet_config()) if result.segnet is not None else None
        rows = _score(test, members, segnet, offset)
        for a in plan.attributes:
            d = [r[2] for r in rows if r[0] == a]
            j = [r[3] for r in rows if r[0] == a]
            lines.append(f"{offset},{a},{np.mean(d):.6f},{np.mean(j):.6f}")
        lines.append(f"{offset},Average,{np.mean([r[2] for r in rows]):.6f},{np.mean([r[3] for r in rows]):.6f}")
    _write_text(out / "ablation.csv", "\n".join(lines) + "\n")
    _write_json(out / "ablate.json", {"command": "ablate", "config": _resolved(args)})
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "bound": cmd_bound,
            "crossval": cmd_crossval, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config = _read_config(argv)
        parser = build_parser(config)
    except (UsageError, argparse.ArgumentTypeError) as exc:
        print(f"tatl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tatl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TatlError, ValueError, OSError) as exc:
        print(f"tatl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
