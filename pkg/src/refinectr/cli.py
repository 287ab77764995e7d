"""``refinectr`` command line: synth, train, eval and sweep.

Settings come from dataclass defaults, then an optional ``--config`` file,
then command-line flags. The config grammar is one ``key = value`` per line;
``#`` starts a comment and keys accept ``-`` or ``_``. Every run writes
``manifest.txt`` to its output directory in the same grammar, so
``refinectr <cmd> --config run/manifest.txt --out other`` repeats the run.
Results are appended to the manifest as comment lines.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from .data import SynthConfig, corrupt_dataset, parse_csv, read_mask_csv, synth_generate, write_csv, write_mask_csv
from .errors import ConfigError, DataError, RefineCTRError
from .metrics import evaluate, sweep_schedules, sweep_steps, write_reports
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .refine import InferenceMode
from .schedules import ScheduleKind
from .schema import load_schema
from .trainer import TrainConfig, fit, heldout_loss

log = logging.getLogger("refinectr")

# keys understood by every command besides the per-command dataclass fields
PATH_KEYS = {
    "synth": (),
    "train": ("schema", "train", "heldout"),
    "eval": ("schema", "data", "mask", "checkpoint"),
    "sweep": ("schema", "data", "checkpoint"),
}
EVAL_KEYS = {"mode": "sgctr", "steps": 5, "schedule": "cosine", "batch_size": 1024, "use_cache": False}
SWEEP_KEYS = {"axis": "schedule", "steps": 5, "steps_list": "1,3,5,8,12", "schedule": "cosine", "batch_size": 1024}


def _norm(key):
    return key.strip().replace("-", "_")


def read_config(path):
    """Parse a ``key = value`` file into a dict of strings."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        out[_norm(key)] = value.strip()
    return out


def _coerce(value, default, key):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return value.lower() in ("true", "1")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def _command_defaults(command):
    """Defaults of every setting a command accepts, in manifest order."""
    d = {k: "" for k in PATH_KEYS[command]}
    if command == "synth":
        d.update(asdict(SynthConfig()))
    elif command == "train":
        tc = asdict(TrainConfig())
        tc.pop("model")
        d.update(tc)
        d.update({f"model_{k}": v for k, v in asdict(ModelConfig()).items()})
    elif command == "eval":
        d.update(EVAL_KEYS)
    else:
        d.update(SWEEP_KEYS)
    return d


def resolve(command, args):
    """Merge defaults, the config file and explicit flags into one settings dict."""
    settings = _command_defaults(command)
    sources = [read_config(args.config)] if args.config else []
    sources.append({k: v for k, v in vars(args).items() if k in settings and v is not None})
    for src in sources:
        for key, value in src.items():
            if key == "command":
                if value != command:
                    raise ConfigError(f"config is for command {value!r}, not {command!r}")
                continue
            if key not in settings:
                raise ConfigError(f"unknown setting {key!r} for {command}")
            settings[key] = _coerce(value, settings[key], key)
    return settings


def _require(settings, *keys):
    for k in keys:
        if not settings[k]:
            raise ConfigError(f"missing required setting {k!r}")


def _prepare_out(out):
    """Create the output directory and prove it is writable before any work."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def write_manifest(out, command, settings, results=()):
    lines = [f"command = {command}\n"]
    lines += [f"{k} = {v}\n" for k, v in settings.items()]
    lines += [f"# {k} = {v}\n" for k, v in results]
    (Path(out) / "manifest.txt").write_text("".join(lines))


def _load_data(settings, key="data"):
    schema = load_schema(settings["schema"])
    ds = parse_csv(settings[key], schema, name=Path(settings[key]).stem)
    return schema, ds


# ---------------------------------------------------------------- commands

def cmd_synth(settings, out):
    cfg = SynthConfig(**{k: settings[k] for k in asdict(SynthConfig())})
    cfg.validate()
    train, test, oracle = synth_generate(cfg)
    schema = cfg.schema()
    corrupted = corrupt_dataset(test, schema, cfg.corruption_rate, cfg.seed + 1)
    (out / "schema.txt").write_text(schema.to_text())
    write_csv(out / "train.csv", train, schema)
    write_csv(out / "test.csv", test, schema)
    write_csv(out / "test_corrupted.csv", corrupted, schema)
    write_mask_csv(out / "test_corrupted_mask.csv", corrupted, schema)
    (out / "oracle.txt").write_text(oracle.describe())
    return [("n_train", len(train)), ("n_test", len(test)),
            ("n_corrupted_samples", int(corrupted.corrupted.any(axis=1).sum()))]


def train_config(settings):
    model = ModelConfig(**{k: settings[f"model_{k}"] for k in asdict(ModelConfig())})
    tc = {f.name: settings[f.name] for f in fields(TrainConfig) if f.name != "model"}
    return TrainConfig(model=model, **tc)


def cmd_train(settings, out):
    _require(settings, "schema", "train")
    cfg = train_config(settings)
    schema, train = _load_data(settings, "train")
    res = fit(train, cfg, schema)
    params = res.params.round_to_float32()
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss", "mask_ratio"))
        w.writerows(res.trace_rows())
    save_checkpoint(params, out / "checkpoint")
    results = [("steps", len(res.losses)), ("degenerate_softmax", res.degenerate),
               ("final_loss", repr(res.losses[-1]) if res.losses else "")]
    if settings["heldout"]:
        held = parse_csv(settings["heldout"], schema, name="heldout")
        results.append(("heldout_loss", repr(heldout_loss(params, held, cfg))))
    return results


def _load_model(settings):
    _require(settings, "schema", "data", "checkpoint")
    schema, ds = _load_data(settings)
    params = load_checkpoint(settings["checkpoint"], schema)
    return schema, ds, params


def _modes(settings):
    kind = ScheduleKind.parse(settings["schedule"])
    names = [m.strip() for m in settings["mode"].split(",") if m.strip()]
    if not names:
        raise ConfigError("no inference mode given")
    return [InferenceMode(n, settings["steps"], kind) for n in names]


def cmd_eval(settings, out):
    modes = _modes(settings)
    schema, ds, params = _load_model(settings)
    if settings["mask"]:
        mask = read_mask_csv(settings["mask"], schema)
        if len(mask) != len(ds):
            raise DataError(f"mask has {len(mask)} rows, data has {len(ds)}")
        ds = type(ds)(ds.tokens, ds.labels, mask, ds.name)
    reports = [evaluate(params, ds, m, batch_size=settings["batch_size"], use_cache=settings["use_cache"])
               for m in modes]
    write_reports(out / "report.csv", reports)
    return [(f"auc[{r.mode}]", repr(r.auc)) for r in reports]


def cmd_sweep(settings, out):
    kind = ScheduleKind.parse(settings["schedule"])
    if settings["axis"] not in ("schedule", "steps"):
        raise ConfigError(f"axis must be 'schedule' or 'steps', got {settings['axis']!r}")
    try:
        steps = [int(s) for s in str(settings["steps_list"]).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"steps_list must be comma-separated integers, got {settings['steps_list']!r}") from None
    if settings["steps"] < 1 or any(s < 1 for s in steps):
        raise ConfigError("step counts must be >= 1")
    _, ds, params = _load_model(settings)
    if settings["axis"] == "schedule":
        result = sweep_schedules(params, ds, settings["steps"], settings["batch_size"])
    else:
        result = sweep_steps(params, ds, kind, steps, settings["batch_size"])
    result.write_csv(out / "sweep.csv")
    return [(f"auc[{c}]", repr(a)) for c, a, _ in result.rows]


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser():
    parser = argparse.ArgumentParser(prog="refinectr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file (flags override it)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, default in _command_defaults(name).items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           metavar=type(default).__name__.upper() if default != "" else "PATH")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        settings = resolve(args.command, args)
        if args.command in ("eval", "sweep"):
            ScheduleKind.parse(settings["schedule"])
        out = _prepare_out(args.out)
        results = COMMANDS[args.command](settings, out)
        write_manifest(out, args.command, settings, results)
    except RefineCTRError as exc:
        print(f"refinectr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # schedule names and other usage errors raised below the CLI layer
        print(f"refinectr: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"refinectr: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
