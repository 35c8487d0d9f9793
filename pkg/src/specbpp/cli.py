"""Command-line driver: pretrain, finetune, eval, gen-data, sample-perm.

Configuration resolves in three layers: documented defaults, then a
flat ``key = value`` config file (``--config``), then explicit flags.
Unknown config keys are rejected. Every run writes its fully resolved
configuration next to its outputs in a fresh timestamped directory so
reruns never overwrite earlier results.

Exit codes: 0 success, 2 configuration or usage error, 3 data error
(missing or malformed files), 4 numeric failure (divergence).

The driver itself is single threaded; SPECBPP_THREADS caps the BLAS
worker pool and must be set before heavy imports, which is why the
numerical modules are imported lazily inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparseable value, bad combination."""


# one defaults table per subcommand; the config file may set any key
# listed here for the chosen subcommand, flags mirror them one for one
COMMON_DEFAULTS = {
    "seed": 0,
    "out_dir": "runs",
}

MODEL_DEFAULTS = {
    "embed_dim": 64,
    "n_heads": 4,
    "scale_channels": 32,
    "bottleneck_ratio": 4,
    "attention_gain": 2.0,
}

PRETRAIN_DEFAULTS = {
    **COMMON_DEFAULTS,
    **MODEL_DEFAULTS,
    "dataset": "",
    "epochs": 200,
    "batch_size": 64,
    "lr": 0.03,
    "clip_norm": 1.0,
    "threshold": 0.99,
    "t_min": 1.0,
    "t_max": 100.0,
    "phase_length": 15,
    "fixed_n": 0,
    "stop_at_exact": 0.0,
}

FINETUNE_DEFAULTS = {
    **COMMON_DEFAULTS,
    **MODEL_DEFAULTS,  # used when no checkpoint seeds the encoder
    "dataset": "",
    "checkpoint": "",
    "epochs": 150,
    "batch_size": 64,
    "lr": 0.01,
    "clip_norm": 1.0,
    "patience": 20,
    "freeze_encoder": False,
}

EVAL_DEFAULTS = {
    **COMMON_DEFAULTS,
    "dataset": "",
    "checkpoint": "",
    "batch_size": 128,
}

GEN_DATA_DEFAULTS = {
    **COMMON_DEFAULTS,
    "count": 2000,
    "bands": 64,
    "height": 8,
    "width": 8,
    "noise": 0.005,
    "out": "",
}

SAMPLE_PERM_DEFAULTS = {
    "seed": 0,
    "n": 4,
    "temperature": 1.0,
    "count": 20,
}

DEFAULTS = {
    "pretrain": PRETRAIN_DEFAULTS,
    "finetune": FINETUNE_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "gen-data": GEN_DATA_DEFAULTS,
    "sample-perm": SAMPLE_PERM_DEFAULTS,
}

_HELP = {
    "seed": "RNG seed; fixed seeds give byte-identical logs",
    "out_dir": "parent directory for timestamped run directories",
    "dataset": "path to a dataset container (.sbpd) or csv",
    "checkpoint": "path to a model checkpoint (.sbpc)",
    "epochs": "training epoch budget",
    "batch_size": "minibatch size",
    "lr": "peak learning rate of the cosine schedule",
    "clip_norm": "global gradient-norm bound per step (0 disables)",
    "threshold": "validation exact-match needed to advance a phase",
    "t_min": "sampler temperature at each phase start",
    "t_max": "sampler temperature at the end of the ramp",
    "phase_length": "epochs over which temperature ramps to t_max",
    "fixed_n": "disable the curriculum and train at this segment count",
    "stop_at_exact": "stop once validation exact-match reaches this",
    "patience": "early-stop patience in epochs",
    "freeze_encoder": "train only the regression head",
    "embed_dim": "embedding width d",
    "n_heads": "attention heads",
    "scale_channels": "channels per multiscale branch",
    "bottleneck_ratio": "channel-gate bottleneck divisor",
    "attention_gain": "init gain on the attention query/key vectors",
    "count": "how many items to generate",
    "bands": "spectral bands per spectrum",
    "height": "patch height in pixels",
    "width": "patch width in pixels",
    "noise": "additive noise sigma for synthetic spectra",
    "out": "explicit output path (default: inside the run directory)",
    "n": "number of segments",
    "temperature": "Boltzmann sampler temperature",
}


def _coerce(key: str, raw: str, like) -> object:
    """Parse a config-file string into the type of the default value."""
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"key '{key}': expected a boolean, got '{raw}'")
    try:
        if isinstance(like, int):
            return int(raw, 0)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"key '{key}': cannot parse '{raw}' as {type(like).__name__}") from None
    return raw.strip()


def parse_config_file(path: str, allowed: dict) -> dict:
    """Flat key = value lines; '#' comments; unknown keys rejected."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    out = {}
    for ln, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in allowed:
            raise ConfigError(f"{path}:{ln}: unknown key '{key}'")
        out[key] = _coerce(key, raw, allowed[key])
    return out


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    defaults = DEFAULTS[command]
    resolved = dict(defaults)
    explicit = {
        k: v for k, v in vars(ns).items()
        if v is not None and k in defaults
    }
    config_path = getattr(ns, "config", None)
    if config_path:
        resolved.update(parse_config_file(config_path, defaults))
    resolved.update(explicit)
    return resolved


def _add_flags(parser: argparse.ArgumentParser, defaults: dict, with_config=True) -> None:
    if with_config:
        parser.add_argument("--config", default=None, metavar="FILE",
                            help="flat key = value config file (default: none)")
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        helptext = f"{_HELP[key]} (default: {value!r})"
        if isinstance(value, bool):
            parser.add_argument(flag, default=None, action="store_const", const=True,
                                dest=key, help=helptext)
        else:
            parser.add_argument(flag, default=None, type=type(value), dest=key, help=helptext)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specbpp",
        description="Band-shuffle pretext pretraining and spectral regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "pretrain": "curriculum pretraining on unlabeled spectra",
        "finetune": "regression fine-tuning from a checkpoint",
        "eval": "recompute metrics for a checkpoint on a dataset",
        "gen-data": "write a synthetic spectra container",
        "sample-perm": "draw permutations from the Boltzmann sampler",
    }
    for name, blurb in specs.items():
        p = sub.add_parser(name, help=blurb, description=blurb)
        _add_flags(p, DEFAULTS[name], with_config=(name not in ("sample-perm",)))
    return parser


# ---------------------------------------------------------------- run dirs


def make_run_dir(out_dir: str, command: str) -> str:
    """Fresh timestamped directory; suffixed when the second collides."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(out_dir, f"{command.replace('-', '_')}-{stamp}")
    path = base
    k = 1
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            path = f"{base}-{k}"
            k += 1


def write_resolved(run_dir: str, resolved: dict) -> None:
    lines = [f"{k} = {resolved[k]}\n" for k in sorted(resolved)]
    with open(os.path.join(run_dir, "resolved.cfg"), "w", encoding="utf-8") as f:
        f.writelines(lines)


def _write_jsonl(path: str, records: list) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_dataset(path: str):
    from . import data as D

    if not path:
        raise ConfigError("no dataset path given (flag --dataset or config key 'dataset')")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    if path.endswith(".csv"):
        return D.read_csv_dataset(path)
    return D.read_dataset(path)


# ---------------------------------------------------------------- commands


def cmd_pretrain(resolved: dict) -> int:
    from . import curriculum as C
    from . import data as D
    from . import model as M
    from . import training as TR

    ds = _load_dataset(resolved["dataset"])
    train_set, val_set, _ = D.split_dataset(ds, seed=resolved["seed"])

    config = TR.TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"],
        seed=resolved["seed"],
        clip_norm=resolved["clip_norm"],
    )
    encoder_config = M.EncoderConfig(
        ds.n_bands,
        embed_dim=resolved["embed_dim"],
        n_heads=resolved["n_heads"],
        scale_channels=resolved["scale_channels"],
        bottleneck_ratio=resolved["bottleneck_ratio"],
        attention_gain=resolved["attention_gain"],
    )
    schedule = C.Schedule(
        t_min=resolved["t_min"],
        t_max=resolved["t_max"],
        phase_length_hint=resolved["phase_length"],
    )
    state = C.CurriculumState(thresholds=(resolved["threshold"],) * C.N_PHASES)

    run_dir = make_run_dir(resolved["out_dir"], "pretrain")
    write_resolved(run_dir, resolved)

    def progress(rec):
        print(
            "epoch {epoch:3d} n={phase_n} T={temperature:7.2f} "
            "loss {train_loss:.4f} val_exact {val_exact_acc:.3f} "
            "val_seg {val_seg_acc:.3f}".format(**rec)
        )

    result = TR.pretrain(
        train_set,
        val_set,
        config,
        encoder_config,
        schedule=schedule,
        state=state,
        fixed_n=resolved["fixed_n"],
        stop_at_exact=resolved["stop_at_exact"],
        progress=progress,
    )

    _write_jsonl(os.path.join(run_dir, "logs.jsonl"), result.logs)
    meta = {
        "kind": "pretrain",
        "encoder": {
            "n_bands": encoder_config.n_bands,
            "embed_dim": encoder_config.embed_dim,
            "n_heads": encoder_config.n_heads,
            "scale_channels": encoder_config.scale_channels,
            "bottleneck_ratio": encoder_config.bottleneck_ratio,
            "attention_gain": encoder_config.attention_gain,
        },
        "input_norm": list(result.input_norm),
        "head_segments": result.head.n_segments,
        "curriculum": {
            "current_n": result.state.current_n,
            "passed": list(result.state.passed),
            "epoch": result.state.epoch,
        },
        "transitions": result.transitions,
        "converged_epoch": result.converged_epoch,
        "seed": resolved["seed"],
    }
    sections = dict(M.encoder_state(result.params))
    sections.update({f"perm_head.{name}": t for name, t in result.head.named()})
    M.save_checkpoint(os.path.join(run_dir, "checkpoint.sbpc"), sections, meta)
    if result.transitions:
        _write_jsonl(os.path.join(run_dir, "transitions.jsonl"), result.transitions)
    final = result.logs[-1] if result.logs else {}
    print(f"pretrain done: n={final.get('phase_n')} "
          f"val_exact {final.get('val_exact_acc', float('nan')):.3f}")
    print(f"run dir: {run_dir}")
    return EXIT_OK


def _rebuild_encoder(arrays: dict, meta: dict):
    from . import model as M

    enc = meta.get("encoder")
    if not isinstance(enc, dict):
        raise M.CheckpointError("checkpoint metadata lacks the encoder description")
    config = M.EncoderConfig(
        enc["n_bands"],
        embed_dim=enc["embed_dim"],
        n_heads=enc["n_heads"],
        scale_channels=enc["scale_channels"],
        bottleneck_ratio=enc["bottleneck_ratio"],
        attention_gain=enc.get("attention_gain", 1.0),
    )
    return M.restore_encoder(arrays, config), config


def cmd_finetune(resolved: dict) -> int:
    from . import model as M
    from . import training as TR

    ds = _load_dataset(resolved["dataset"])
    if ds.targets is None:
        raise ConfigError("finetune needs a labeled dataset (targets column)")

    config = TR.TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"],
        seed=resolved["seed"],
        patience=resolved["patience"],
        clip_norm=resolved["clip_norm"],
    )

    input_norm = None
    if resolved["checkpoint"]:
        arrays, meta = M.load_checkpoint(resolved["checkpoint"])
        params, encoder_config = _rebuild_encoder(arrays, meta)
        if encoder_config.n_bands != ds.n_bands:
            raise ConfigError(
                f"checkpoint expects {encoder_config.n_bands} bands, dataset has {ds.n_bands}"
            )
        if "input_norm" in meta:
            input_norm = tuple(meta["input_norm"])
        start = "pretrained checkpoint"
    else:
        import numpy as np

        encoder_config = M.EncoderConfig(
            ds.n_bands,
            embed_dim=resolved["embed_dim"],
            n_heads=resolved["n_heads"],
            scale_channels=resolved["scale_channels"],
            bottleneck_ratio=resolved["bottleneck_ratio"],
            attention_gain=resolved["attention_gain"],
        )
        params = M.EncoderParams(encoder_config, np.random.default_rng(resolved["seed"]))
        start = "random initialization"

    run_dir = make_run_dir(resolved["out_dir"], "finetune")
    write_resolved(run_dir, resolved)
    print(f"fine-tuning from {start}")

    def progress(rec):
        print("epoch {epoch:3d} train_mse {train_mse:.4f} "
              "val_r2 {val_r2:.4f}".format(**rec))

    result = TR.finetune(
        params,
        ds,
        config,
        freeze_encoder=resolved["freeze_encoder"],
        input_norm=input_norm,
        progress=progress,
    )

    _write_jsonl(os.path.join(run_dir, "logs.jsonl"), result.logs)
    report = result.report
    with open(os.path.join(run_dir, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")

    meta = {
        "kind": "finetune",
        "encoder": {
            "n_bands": encoder_config.n_bands,
            "embed_dim": encoder_config.embed_dim,
            "n_heads": encoder_config.n_heads,
            "scale_channels": encoder_config.scale_channels,
            "bottleneck_ratio": encoder_config.bottleneck_ratio,
            "attention_gain": encoder_config.attention_gain,
        },
        "input_norm": list(result.input_norm),
        "target_mean": result.target_mean,
        "target_sd": result.target_sd,
        "metrics": report.to_dict(),
        "seed": resolved["seed"],
    }
    sections = dict(M.encoder_state(result.params))
    sections.update({f"reg_head.{name}": t for name, t in result.head.named()})
    M.save_checkpoint(os.path.join(run_dir, "checkpoint.sbpc"), sections, meta)

    print(TR.metrics_banner(report))
    print(f"run dir: {run_dir}")
    return EXIT_OK


def cmd_eval(resolved: dict) -> int:
    import numpy as np

    from . import model as M
    from . import training as TR

    if not resolved["checkpoint"]:
        raise ConfigError("no checkpoint given (flag --checkpoint or config key 'checkpoint')")
    ds = _load_dataset(resolved["dataset"])
    if ds.targets is None:
        raise ConfigError("eval needs a labeled dataset (targets column)")

    arrays, meta = M.load_checkpoint(resolved["checkpoint"])
    params, encoder_config = _rebuild_encoder(arrays, meta)
    if encoder_config.n_bands != ds.n_bands:
        raise ConfigError(
            f"checkpoint expects {encoder_config.n_bands} bands, dataset has {ds.n_bands}"
        )

    head = M.RegressionHeadParams(encoder_config.embed_dim, np.random.default_rng(resolved["seed"]))
    if any(k.startswith("reg_head.") for k in arrays):
        for name, t in head.named():
            key = f"reg_head.{name}"
            if key not in arrays:
                raise M.CheckpointError(f"checkpoint is missing section '{key}'")
            t.data = arrays[key].astype(np.float32, copy=True)

    input_norm = tuple(meta.get("input_norm", (0.0, 1.0)))
    # an encoder-only checkpoint has no target scale; anchor predictions
    # to the evaluation targets so an uninformative model scores near 0
    y_mean = meta.get("target_mean", float(ds.targets.mean()))
    y_sd = meta.get("target_sd", float(ds.targets.std()) or 1.0)

    cubes = TR.apply_input_norm(ds.cubes, input_norm)
    preds = np.empty(len(ds), dtype=np.float64)
    bs = resolved["batch_size"]
    from .tensor import Tensor

    for i in range(0, len(ds), bs):
        z = M.encode(Tensor(cubes[i : i + bs]), params)
        out = M.regression_forward(z, head)
        preds[i : i + bs] = out.data.astype(np.float64) * y_sd + y_mean

    report = TR.compute_metrics(preds, ds.targets)
    run_dir = make_run_dir(resolved["out_dir"], "eval")
    write_resolved(run_dir, resolved)
    with open(os.path.join(run_dir, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    print(TR.metrics_banner(report))
    print(f"run dir: {run_dir}")
    return EXIT_OK


def cmd_gen_data(resolved: dict) -> int:
    import numpy as np

    from . import data as D

    ds = D.generate_synthetic(
        resolved["count"],
        resolved["bands"],
        np.random.default_rng(resolved["seed"]),
        height=resolved["height"],
        width=resolved["width"],
        noise=resolved["noise"],
    )
    run_dir = make_run_dir(resolved["out_dir"], "gen_data")
    write_resolved(run_dir, resolved)
    out_path = resolved["out"] or os.path.join(run_dir, "data.sbpd")
    if os.path.exists(out_path):
        raise ConfigError(f"refusing to overwrite existing file: {out_path}")
    D.write_dataset(out_path, ds)
    print(f"wrote {len(ds)} patches ({resolved['bands']} bands, "
          f"{resolved['height']}x{resolved['width']}) to {out_path}")
    return EXIT_OK


def cmd_sample_perm(resolved: dict) -> int:
    import numpy as np

    from . import perms as P

    n = resolved["n"]
    count = resolved["count"]
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    sampler = P.BoltzmannSampler(n, resolved["temperature"])
    rng = np.random.default_rng(resolved["seed"])
    draws = sampler.sample_index_batch(count, rng)
    freq = {}
    for row in draws:
        key = " ".join(str(int(v)) for v in row)
        print(key)
        freq[key] = freq.get(key, 0) + 1
    print()
    print(f"frequency over {count} draws (n={n}, T={resolved['temperature']}):")
    width = max(len(k) for k in freq)
    for key in sorted(freq, key=lambda k: (-freq[k], k)):
        share = freq[key] / count
        print(f"  {key:<{width}}  {freq[key]:>7}  {share:7.2%}")
    return EXIT_OK


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
    "sample-perm": cmd_sample_perm,
}


def _cap_threads() -> None:
    """SPECBPP_THREADS caps the BLAS pool; must run before numpy loads."""
    cap = os.environ.get("SPECBPP_THREADS")
    if not cap:
        return
    try:
        value = str(max(1, int(cap)))
    except ValueError:
        raise ConfigError(f"SPECBPP_THREADS must be an integer, got '{cap}'") from None
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, value)


def main(argv=None) -> int:
    try:
        _cap_threads()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    parser = build_parser()
    ns = parser.parse_args(argv)

    from .data import DataFormatError
    from .model import CheckpointError
    from .tensor import NonFiniteError
    from .training import DivergenceError

    try:
        resolved = resolve_config(ns.command, ns)
        return _COMMANDS[ns.command](resolved)
    # data errors outrank ValueError: DataFormatError subclasses it
    except (FileNotFoundError, DataFormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as e:
        # domain constructors raise ValueError on bad hyperparameters
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
