"""Command-line entry point: ``robust-saliency <subcommand> ...``.

Subcommands: gen-data, train, attack, predict, eval, sweep, ablate.
Exit status is 0 on success, 2 for configuration errors and 3 for data
errors. Every subcommand that writes an output directory also writes
``run.json`` there: the fully resolved configuration (dataset manifest,
seed and every component config) that reproduces the directory bitwise.

Configuration can come from a JSON file (``--config``) with optional
sections ``slic``, ``bilateral``, ``crf``, ``attack``, ``sgd``,
``defense`` and top-level ``seed``; command-line flags override it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import checkpoint
from .attack import AttackConfig, generate_adversarial
from .backbone import init_convnet
from .core import ConfigError, DataError
from .crf import CrfParams
from .data import Sample, SyntheticSpec, gen_synthetic, load_dataset, manifest_mean, read_mask
from .filters import BilateralConfig
from .imageio import read_image, write_image
from .metrics import evaluate
from .pipeline import (ABLATIONS, DEFENSES, DefenseConfig, Models, ablate_all, epsilon_sweep,
                       predict_all, write_rows_csv)
from .shielding import SlicConfig
from .train import SgdConfig, train

# Fine-tuning with shielding and the CRF keeps the backbone nearly frozen (1000:1 CRF to backbone
# learning rate); larger backbone steps teach the net to call shuffled speckle salient.
ROSA_SGD_DEFAULTS = {"learning_rate": 1e-6, "crf_learning_rate": 1e-3, "clip_grad_norm": 1.0, "epochs": 2}

log = logging.getLogger("robust_saliency")

EXIT_CONFIG = 2
EXIT_DATA = 3
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")


# -- configuration -------------------------------------------------------------

def _section(cls, base: dict | None, overrides: dict):
    """Build dataclass ``cls`` from a config-file section plus non-None overrides."""
    names = {f.name for f in fields(cls)}
    values = dict(base or {})
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such config file: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return cfg


class Resolved:
    """All component configs for one invocation."""

    def __init__(self, args: argparse.Namespace):
        cfg = _load_config(getattr(args, "config", None))
        self.seed = int(args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0))
        self.slic = _section(SlicConfig, cfg.get("slic"), {
            "k": getattr(args, "slic_k", None),
            "compactness": getattr(args, "slic_compactness", None),
        })
        self.bilateral = _section(BilateralConfig, cfg.get("bilateral"), {
            "sigma_spatial": getattr(args, "bilateral_sigma_spatial", None),
            "sigma_range": getattr(args, "bilateral_sigma_range", None),
        })
        self.crf = _section(CrfParams, cfg.get("crf"), {
            "iters": getattr(args, "crf_iters", None),
            "window": getattr(args, "crf_window", None),
        })
        if getattr(args, "crf_exact", False):
            self.crf.window = None
        defense = dict(cfg.get("defense") or {})
        self.defense_name = getattr(args, "defense", None) or defense.pop("name", "none")
        defense.pop("name", None)
        unknown = set(defense) - {"smooth_radius", "quant_bits", "shield_draws"}
        if unknown:
            raise ConfigError(f"unknown defense keys: {sorted(unknown)}")
        defense.update({k: v for k, v in {
            "smooth_radius": getattr(args, "smooth_radius", None),
            "quant_bits": getattr(args, "quant_bits", None),
            "shield_draws": getattr(args, "resample_shield", None),
        }.items() if v is not None})
        self.defense = DefenseConfig(self.slic, self.bilateral, **defense)
        attack = dict(cfg.get("attack") or {})
        attack.pop("mean_pixel", None)
        self.attack_base = attack
        self.attack_over = {
            "epsilon": getattr(args, "epsilon", None),
            "alpha": getattr(args, "alpha", None),
            "max_iters": getattr(args, "max_iters", None),
            "strict_clip": getattr(args, "strict_clip", None),
        }
        sgd = {**(ROSA_SGD_DEFAULTS if getattr(args, "mode", None) == "rosa" else {}), **(cfg.get("sgd") or {})}
        self.sgd = _section(SgdConfig, sgd, {
            "epochs": getattr(args, "epochs", None),
            "learning_rate": getattr(args, "learning_rate", None),
            "crf_learning_rate": getattr(args, "crf_learning_rate", None),
            "batch_size": getattr(args, "batch_size", None),
            "clip_grad_norm": getattr(args, "clip_grad_norm", None),
        })

    def attack(self, mean) -> AttackConfig:
        return _section(AttackConfig, self.attack_base, {**self.attack_over, "mean_pixel": tuple(mean)})

    def to_dict(self, mean=None) -> dict:
        crf = asdict(self.crf)
        crf["mu"] = self.crf.mu.tolist()
        out = {
            "seed": self.seed,
            "slic": asdict(self.slic),
            "bilateral": asdict(self.bilateral),
            "crf": crf,
            "defense": {"name": self.defense_name, "smooth_radius": self.defense.smooth_radius,
                        "quant_bits": self.defense.quant_bits, "shield_draws": self.defense.shield_draws},
            "sgd": asdict(self.sgd),
        }
        if mean is not None:
            a = asdict(self.attack(mean))
            a["mean_pixel"] = list(a["mean_pixel"])
            out["attack"] = a
        return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _record(out: Path, command: str, inputs: dict, resolved: Resolved | None = None, mean=None,
            extra: dict | None = None) -> None:
    run = {"command": command, "inputs": inputs}
    if resolved is not None:
        run["config"] = resolved.to_dict(mean)
    if extra:
        run.update(extra)
    _write_json(out / "run.json", run)


def _abs(path) -> str:
    return str(Path(path).resolve())


def _images_in(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"no such directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"{d}: no images found")
    return files


def _samples(args) -> list[Sample]:
    """Samples from the manifest split, optionally with images replaced from ``--input-dir``."""
    samples = load_dataset(args.manifest, args.split)
    if getattr(args, "input_dir", None):
        by_stem = {p.stem: p for p in _images_in(args.input_dir)}
        replaced = []
        for s in samples:
            if s.name not in by_stem:
                raise DataError(f"{args.input_dir}: missing image for {s.name}")
            img = read_image(by_stem[s.name])
            if img.shape != s.image.shape:
                raise DataError(f"{by_stem[s.name]}: shape {img.shape} differs from dataset image {s.image.shape}")
            replaced.append(Sample(s.name, img, s.mask))
        samples = replaced
    return samples


def _models(args, need_rosa: bool) -> Models:
    net, _, _ = checkpoint.load(args.model)
    rosa_net = crf = None
    if getattr(args, "rosa_model", None):
        rosa_net, crf, _ = checkpoint.load(args.rosa_model)
        if crf is None:
            raise DataError(f"{args.rosa_model}: checkpoint has no CRF parameters")
    elif need_rosa:
        raise ConfigError("this defense needs --rosa-model (a checkpoint from `train --mode rosa`)")
    return Models(net, rosa_net, crf)


def _apply_crf_overrides(models: Models, resolved: Resolved, args) -> None:
    """Inference-time CRF overrides (iterations, window) on top of learned weights."""
    if models.crf is None:
        return
    if getattr(args, "crf_iters", None) is not None:
        models.crf.iters = int(args.crf_iters)
    if getattr(args, "crf_window", None) is not None:
        models.crf.window = int(args.crf_window)
    if getattr(args, "crf_exact", False):
        models.crf.window = None


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec_kw = {
        "splits": {"train": args.n_train, "val": args.n_val, "test": args.n_test},
        "size": args.size,
        "noise": args.noise,
        "texture": args.texture,
        "seed": args.seed if args.seed is not None else 0,
    }
    if min(spec_kw["splits"].values()) < 0 or args.size < 8:
        raise ConfigError("split sizes must be >= 0 and --size >= 8")
    spec = SyntheticSpec(**spec_kw)
    out = _out_dir(args.out)
    path = gen_synthetic(spec, out)
    _record(out, "gen-data", {"manifest": "manifest.json"})
    print(path)
    return 0


def cmd_train(args) -> int:
    resolved = Resolved(args)
    mean = manifest_mean(args.manifest)
    tr = load_dataset(args.manifest, "train")
    val = load_dataset(args.manifest, "val") if args.val else None
    if args.mode == "plain":
        net = init_convnet(seed=resolved.seed) if args.init is None else checkpoint.load(args.init)[0]
        result = train(net, None, tr, resolved.sgd, None, mean, resolved.seed, resolved.bilateral, val)
    else:
        if args.init is None:
            raise ConfigError("train --mode rosa fine-tunes an existing backbone; pass --init")
        net = checkpoint.load(args.init)[0]
        result = train(net, resolved.crf, tr, resolved.sgd, resolved.slic, mean, resolved.seed,
                       resolved.bilateral, val)
    out = _out_dir(args.out)
    meta = {"mean_pixel": list(mean), "seed": resolved.seed, "mode": args.mode}
    checkpoint.save(out / "model.ckpt", result.net, result.crf, meta)
    _write_json(out / "train_log.json", {
        "losses": result.losses, "val_f_beta": result.val_f_beta,
        "best_epoch": result.best_epoch, "stopped_early": result.stopped_early,
    })
    _record(out, "train", {"manifest": _abs(args.manifest), "init": args.init and _abs(args.init),
                           "mode": args.mode, "validate": bool(args.val)}, resolved, mean)
    print(out / "model.ckpt")
    return 0


def cmd_attack(args) -> int:
    resolved = Resolved(args)
    mean = manifest_mean(args.manifest)
    cfg = resolved.attack(mean)
    net, _, _ = checkpoint.load(args.model)
    samples = load_dataset(args.manifest, args.split)
    out = _out_dir(args.out)
    (out / "images").mkdir(exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    for s in samples:
        adv, trace = generate_adversarial(net, s.image, s.mask, cfg)
        write_image(adv, out / "images" / f"{s.name}.ppm")
        _write_json(out / "traces" / f"{s.name}.json", trace.to_dict())
    _record(out, "attack", {"manifest": _abs(args.manifest), "model": _abs(args.model), "split": args.split},
            resolved, mean)
    print(out / "images")
    return 0


def cmd_predict(args) -> int:
    resolved = Resolved(args)
    if resolved.defense_name not in DEFENSES:
        raise ConfigError(f"unknown defense {resolved.defense_name!r}; expected one of {DEFENSES}")
    mean = manifest_mean(args.manifest)
    models = _models(args, resolved.defense_name == "rosa")
    _apply_crf_overrides(models, resolved, args)
    samples = _samples(args)
    maps = predict_all(resolved.defense_name, [s.image for s in samples], models, resolved.defense,
                       mean, resolved.seed)
    out = _out_dir(args.out)
    for s, m in zip(samples, maps):
        write_image(m, out / f"{s.name}.pgm")
    _record(out, "predict", {"manifest": _abs(args.manifest), "split": args.split,
                             "input_dir": args.input_dir and _abs(args.input_dir),
                             "model": _abs(args.model), "rosa_model": args.rosa_model and _abs(args.rosa_model)},
            resolved, mean)
    print(out)
    return 0


def cmd_eval(args) -> int:
    preds = {p.stem: p for p in _images_in(args.pred_dir)}
    gts = {p.stem: p for p in _images_in(args.gt_dir)}
    names = sorted(preds)
    missing = [n for n in names if n not in gts]
    if missing:
        raise DataError(f"{args.gt_dir}: no mask for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    maps, masks = [], []
    for n in names:
        s = read_image(preds[n]).data
        if s.shape[2] != 1:
            s = s.mean(axis=2, keepdims=True)
        maps.append(s[:, :, 0] / 255.0)
        masks.append(read_mask(gts[n]))
        if maps[-1].shape != masks[-1].shape:
            raise DataError(f"{preds[n]}: size {maps[-1].shape} differs from mask {masks[-1].shape}")
    report = evaluate(maps, masks, names, n_thresholds=args.n_thresholds,
                      printed_denominator=args.printed_denominator)
    out = Path(args.out)
    if not out.parent.exists():
        raise DataError(f"output directory does not exist: {out.parent}")
    report.write_json(out)
    curve = Path(args.curve_csv) if args.curve_csv else out.with_suffix(".csv")
    report.write_curve_csv(curve)
    print(f"F-beta {report.f_beta:.4f}  MAE {report.mae:.4f}  P {report.precision:.4f}  R {report.recall:.4f}")
    return 0


def cmd_sweep(args) -> int:
    resolved = Resolved(args)
    mean = manifest_mean(args.manifest)
    defenses = [d.strip() for d in args.defenses.split(",") if d.strip()]
    models = _models(args, "rosa" in defenses)
    _apply_crf_overrides(models, resolved, args)
    try:
        eps_list = [float(e) for e in args.eps.split(",") if e.strip()]
    except ValueError:
        raise ConfigError(f"--eps must be a comma-separated list of numbers, got {args.eps!r}") from None
    if not eps_list:
        raise ConfigError("--eps is empty")
    samples = load_dataset(args.manifest, args.split)
    rows = epsilon_sweep(samples, eps_list, models, resolved.defense, resolved.attack(mean), defenses,
                         resolved.seed)
    out = _out_dir(args.out)
    _write_json(out / "sweep.json", rows)
    write_rows_csv(rows, out / "sweep.csv", ["epsilon", "defense", "f_beta", "mae", "precision", "recall"])
    _record(out, "sweep", {"manifest": _abs(args.manifest), "split": args.split, "model": _abs(args.model),
                           "rosa_model": args.rosa_model and _abs(args.rosa_model),
                           "eps": eps_list, "defenses": defenses}, resolved, mean)
    for r in rows:
        print(f"eps {r['epsilon']:g}  {r['defense']:<6}  F-beta {r['f_beta']:.4f}  MAE {r['mae']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    resolved = Resolved(args)
    mean = manifest_mean(args.manifest)
    models = _models(args, True)
    _apply_crf_overrides(models, resolved, args)
    samples = _samples(args)
    gts = [s.mask for s in samples]
    rows = []
    for mode in ABLATIONS:
        rep = evaluate(ablate_all(mode, [s.image for s in samples], models, resolved.defense, mean,
                                  resolved.seed), gts, with_curve=False)
        rows.append({"mode": mode, "f_beta": rep.f_beta, "mae": rep.mae,
                     "precision": rep.precision, "recall": rep.recall})
    out = _out_dir(args.out)
    _write_json(out / "ablation.json", rows)
    write_rows_csv(rows, out / "ablation.csv", ["mode", "f_beta", "mae", "precision", "recall"])
    _record(out, "ablate", {"manifest": _abs(args.manifest), "split": args.split,
                            "input_dir": args.input_dir and _abs(args.input_dir),
                            "rosa_model": _abs(args.rosa_model)}, resolved, mean)
    for r in rows:
        print(f"{r['mode']:<5} F-beta {r['f_beta']:.4f}  MAE {r['mae']:.4f}")
    return 0


# -- argument parsing ------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (sections slic, bilateral, crf, attack, sgd, defense)")
    p.add_argument("--seed", type=int, help="experiment seed (init, training order, test-time shuffles)")


def _add_shield(p: argparse.ArgumentParser) -> None:
    p.add_argument("--slic-k", type=int, help="number of superpixels (default 14 for 64x64)")
    p.add_argument("--slic-compactness", type=float)
    p.add_argument("--bilateral-sigma-spatial", type=float)
    p.add_argument("--bilateral-sigma-range", type=float)
    p.add_argument("--crf-iters", type=int, help="mean-field iterations")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--crf-exact", action="store_true", help="dense kernels over all pixel pairs (default)")
    g.add_argument("--crf-window", type=int, help="truncate CRF kernels to a (2w+1)^2 window")


def _add_defense(p: argparse.ArgumentParser) -> None:
    p.add_argument("--quant-bits", type=int)
    p.add_argument("--smooth-radius", type=int)
    p.add_argument("--resample-shield", type=int, metavar="N", help="average N independent shuffles")


def _add_attack(p: argparse.ArgumentParser, with_eps: bool = True) -> None:
    if with_eps:
        p.add_argument("--epsilon", type=float, help="L-inf budget in 0-255 units (default 20)")
    p.add_argument("--alpha", type=float, help="step length (default 1)")
    p.add_argument("--max-iters", type=int, help="iteration cap T (default min(100, 2*eps/alpha + 20))")
    p.add_argument("--strict-clip", dest="strict_clip", action="store_true", default=None,
                   help="clip to the epsilon-ball before and after rounding (default)")
    p.add_argument("--no-strict-clip", dest="strict_clip", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-saliency",
                                     description="Adversarial attacks on saliency models and a shuffling + CRF defense.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=40)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    p.add_argument("--texture", type=float, default=SyntheticSpec.texture,
                   help="amplitude of the foreground stripe texture")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a backbone (plain) or fine-tune it with shielding and the CRF (rosa)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("plain", "rosa"), default="plain")
    p.add_argument("--init", help="checkpoint to start from (required for --mode rosa)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--crf-learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clip-grad-norm", type=float, help="rescale each batch gradient to at most this norm")
    p.add_argument("--no-val", dest="val", action="store_false", help="skip validation and early stopping")
    _add_common(p)
    _add_shield(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="white-box attack a split; writes PPM images and JSON traces")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    _add_common(p)
    _add_attack(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("predict", help="saliency maps (PGM) under a defense")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="plain backbone checkpoint")
    p.add_argument("--rosa-model", help="fine-tuned checkpoint with CRF (for --defense rosa)")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--input-dir", help="use these images (e.g. attack output) instead of the dataset's")
    p.add_argument("--defense", choices=DEFENSES)
    _add_common(p)
    _add_shield(p)
    _add_defense(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="MAE / P / R / F-beta and PR curve of saliency maps")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--curve-csv", help="PR curve CSV path (default: report path with .csv)")
    p.add_argument("--n-thresholds", type=int, default=256)
    p.add_argument("--printed-denominator", action="store_true",
                   help="use beta instead of beta^2 in the F denominator (audit variant)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="F-beta and MAE of each defense over a list of epsilons")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--rosa-model")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--eps", default="0,5,10,20,30")
    p.add_argument("--defenses", default=",".join(DEFENSES))
    _add_common(p)
    _add_shield(p)
    _add_defense(p)
    _add_attack(p, with_eps=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="shielding-only / restoration-only / full pipeline comparison")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rosa-model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--input-dir", help="evaluate on these images (e.g. attack output)")
    _add_common(p)
    _add_shield(p)
    _add_defense(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ablate":
        args.model = args.rosa_model  # the plain backbone is not used by ablations
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
