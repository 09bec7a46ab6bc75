"""Command-line interface: ``faelvm <command> [options]``.

Every command resolves its configuration from built-in defaults, then an
optional ``--config`` JSON file (a plain option mapping or a previous run's
``manifest.json``), then explicit flags. The resolved configuration is written
to ``<out>/manifest.json``; running the same command with
``--config <out>/manifest.json`` reproduces every other output file byte for
byte. Wall-clock goes to ``timing.json`` and ``timing_history.csv`` only.

Exit codes: 0 ok, 1 unexpected failure, 2 usage, 3 malformed input file,
4 unsupported format version, 5 invalid configuration, 6 invalid input values,
7 training aborted. Failures print a one-line JSON object on stderr and, when
possible, write ``<out>/error.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import io as fio
from .errors import ConfigError, FaeLVMError, FormatError, TrainingAborted, VersionError

log = logging.getLogger("faelvm")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_FORMAT, EXIT_VERSION, EXIT_CONFIG, EXIT_INPUT, EXIT_ABORTED = range(8)
MANIFEST_FORMAT = 1


class UsageError(FaeLVMError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, VersionError):
        return EXIT_VERSION
    if isinstance(exc, FormatError):
        return EXIT_FORMAT
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingAborted):
        return EXIT_ABORTED
    if isinstance(exc, (ValueError, FaeLVMError)):
        return EXIT_INPUT
    return EXIT_FAILURE


def version_string() -> str:
    """Package version, suffixed with the short commit hash inside a git checkout."""
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"v{__version__}-g{sha}" if sha else f"v{__version__}"


# -- options -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Opt:
    key: str
    kind: Any  # int, float, str, bool, or "ints"/"floats"/"strs"
    default: Any
    help: str
    choices: tuple | None = None
    path: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _coerce(opt: Opt, value):
    """Convert a flag string or a JSON value to the option's type."""
    try:
        if opt.kind in ("ints", "floats", "strs"):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            elem = {"ints": int, "floats": float, "strs": str}[opt.kind]
            out = [elem(v.strip() if isinstance(v, str) else v) for v in value]
        elif opt.kind is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                value = value.lower() in ("true", "1", "yes")
            out = bool(value)
        elif opt.kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            out = int(value)
        else:
            out = opt.kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{opt.key}: cannot interpret {value!r} as {getattr(opt.kind, '__name__', opt.kind)}") from None
    if opt.choices is not None:
        items = out if isinstance(out, list) else [out]
        bad = [v for v in items if v not in opt.choices]
        if bad:
            raise ConfigError(f"{opt.key}: {bad[0]!r} not in {list(opt.choices)}")
    if opt.path and out:
        out = str(Path(out).resolve())
    return out


MODEL_OPTS = [
    Opt("spaces", "strs", ["S1"], "latent spaces, e.g. S1,S1 or T2,R2"),
    Opt("decoder", str, "bump", "tuning-curve decoder", ("bump", "shared_basis", "free_basis", "b", "s", "n")),
    Opt("n_basis", int, 4, "basis functions per latent space"),
    Opt("kernel_size", int, 9, "encoder depthwise kernel size (odd)"),
    Opt("n_hidden", int, 64, "encoder hidden units"),
    Opt("nonlinearity", str, "softplus", "output nonlinearity", ("exp", "softplus")),
    Opt("learn_coeff", bool, False, "learn a per-neuron gain"),
    Opt("learn_mean", bool, False, "learn basis means"),
    Opt("learn_var", bool, False, "learn basis widths"),
    Opt("isotropic", bool, False, "one width shared by all factors"),
    Opt("background_rate", float, 1e-4, "rate floor added to every neuron"),
    Opt("likelihood", str, "poisson", "observation model", ("poisson", "gaussian")),
]

TRAIN_OPTS = [
    Opt("learning_rate", float, 0.001, "Adam learning rate"),
    Opt("chunk_length", int, 128, "time bins per training chunk"),
    Opt("batch_size", int, 1, "chunks per optimizer step"),
    Opt("num_worse", int, 5, "epochs without improvement before stopping"),
    Opt("max_epochs", int, 500, "epoch cap"),
    Opt("weight_kl", float, 0.0, "KL weight"),
    Opt("weight_time", float, 0.0, "transition penalty weight"),
    Opt("time_penalty", str, "L1", "transition penalty norm", ("L1", "L2")),
    Opt("weight_entropy", float, 0.0, "ensemble-weight entropy penalty"),
]

SEED = Opt("seed", int, 0, "random seed")


def _with_defaults(opts: list[Opt], **overrides) -> list[Opt]:
    return [Opt(o.key, o.kind, overrides.get(o.key, o.default), o.help, o.choices, o.path) for o in opts]


def _model_config(cfg: dict):
    from .model import ModelConfig

    return ModelConfig(**{o.key: cfg[o.key] for o in MODEL_OPTS})


def _train_config(cfg: dict):
    from .training import TrainConfig

    return TrainConfig(**{o.key: cfg[o.key] for o in TRAIN_OPTS}, seed=cfg["seed"])


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _load_spikes(path: str) -> np.ndarray:
    try:
        return fio.load_spikes(path)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None


def _load_trajectory(path: str) -> np.ndarray:
    from .manifold import load_trajectory_csv

    try:
        return load_trajectory_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None


@dataclass
class RunContext:
    out: Path
    threads: int
    svg: bool = False


# -- commands ----------------------------------------------------------------------------

PRESETS = {
    "appendix-b": {"width": 1.2, "peak": 0.5, "background": 0.005, "gp_sd": 5.0, "gp_scale": 50.0},
}

SIMULATE_OPTS = [
    Opt("preset", str, "appendix-b", "parameter preset for unset generator values", tuple(PRESETS)),
    Opt("kind", str, "ring", "ring, multi (k rings) or visual (moving dot, calcium traces)", ("ring", "multi", "visual")),
    Opt("n", int, 30, "neurons (ring/multi)"),
    Opt("t", int, 1000, "time bins"),
    Opt("k", int, 1, "ensembles (multi)"),
    Opt("width", float, None, "tuning width (rad)"),
    Opt("peak", float, None, "peak rate (spikes/bin)"),
    Opt("background", float, None, "background rate (spikes/bin)"),
    Opt("gp_sd", float, None, "latent GP standard deviation"),
    Opt("gp_scale", float, None, "latent GP length scale (bins)"),
    Opt("format", str, "csv", "spike file format", ("csv", "bin")),
    SEED,
]


def cmd_simulate(cfg: dict, ctx: RunContext) -> None:
    from .datagen import SynthConfig, VisualToyConfig, generate_multi_ensemble, generate_visual_toy
    from .manifold import save_trajectory_csv

    preset = PRESETS[cfg["preset"]]
    val = {k: preset[k] if cfg[k] is None else cfg[k] for k in preset}
    ext = ".bin" if cfg["format"] == "bin" else ".csv"
    if cfg["kind"] == "visual":
        data, gt = generate_visual_toy(cfg["seed"], VisualToyConfig(n_bins=cfg["t"], seed=cfg["seed"]))
        fio.save_spikes(ctx.out / f"traces{ext}", data)
    else:
        k = 1 if cfg["kind"] == "ring" else cfg["k"]
        synth = SynthConfig(
            n_neurons=cfg["n"],
            n_bins=cfg["t"],
            n_ensembles=k,
            tuning_width=val["width"],
            peak_rate=val["peak"],
            background=val["background"],
            gp_sd=val["gp_sd"],
            gp_scale=val["gp_scale"],
            seed=cfg["seed"],
        )
        data, gt = generate_multi_ensemble(synth)
        fio.save_spikes(ctx.out / f"spikes{ext}", data)
    save_trajectory_csv(ctx.out / "latents.csv", gt.latents)
    fio.save_labels_csv(ctx.out / "labels.csv", gt.labels)
    fio.dump_json(ctx.out / "ground_truth.json", {**gt.to_dict(), "generator": val, "kind": cfg["kind"]})


FIT_OPTS = [
    Opt("spikes", str, "", "spike matrix (CSV or binary)", path=True),
    *MODEL_OPTS,
    *TRAIN_OPTS,
    Opt("n_seeds", int, 1, "independent fits; the highest train LLH is kept"),
    Opt("test_frac", float, 0.05, "fraction of bins held out at the end"),
    Opt("n_test_neurons", int, 0, "neurons held out from the encoder"),
    SEED,
]


def cmd_fit(cfg: dict, ctx: RunContext) -> None:
    from .evalkit import write_rows
    from .experiments import split_data
    from .inference import infer_variational
    from .manifold import save_trajectory_csv
    from .training import fit_test_neurons, multi_seed_fit

    _require(cfg, "spikes")
    y = _load_spikes(cfg["spikes"])
    N, T = y.shape
    if not 0.0 <= cfg["test_frac"] < 1.0:
        raise ConfigError("test_frac must be in [0, 1)")
    sp = split_data(N, T, cfg["n_test_neurons"], int(round(cfg["test_frac"] * T)), cfg["seed"])
    tb = sp.n_train_bins
    y_train = y[sp.train_neurons, :tb]
    mc, tc = _model_config(cfg), _train_config(cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["n_seeds"])]
    best, results = multi_seed_fit(y_train, mc, tc, cfg["n_seeds"], threads=ctx.threads, seeds=seeds)
    best.model.save(ctx.out / "model.json")
    write_rows(ctx.out / "history.csv", [{"epoch": h["epoch"], "objective": h["objective"]} for h in best.history])
    write_rows(ctx.out / "timing_history.csv", [{"epoch": i, "wall_clock": w} for i, w in enumerate(best.epoch_wall)])
    write_rows(ctx.out / "fits.csv", [{"seed": r.seed, "train_llh": r.train_llh, "best_epoch": r.best_epoch, "epochs": len(r.history) - 1} for r in results])
    fio.dump_json(ctx.out / "split.json", {
        "n_neurons": N,
        "n_bins": T,
        "train_neurons": sp.train_neurons,
        "test_neurons": sp.test_neurons,
        "n_train_bins": tb,
    })
    z_train = infer_variational(best.model, y_train)
    save_trajectory_csv(ctx.out / "latents_train.csv", z_train)
    summary = {"best_seed": best.seed, "train_llh": best.train_llh, "best_epoch": best.best_epoch, "chunk_length": best.chunk_length}
    if len(sp.test_neurons):
        test = fit_test_neurons(best.model, z_train, y[sp.test_neurons, :tb], seed=cfg["seed"])
        test.save(ctx.out / "test_model.json")
    fio.dump_json(ctx.out / "fit.json", summary)


INFER_OPTS = [
    Opt("model", str, "", "trained model checkpoint", path=True),
    Opt("spikes", str, "", "spike matrix", path=True),
    Opt("split", str, "", "split.json from fit; selects training neurons", path=True),
    Opt("bins", str, "auto", "bins to infer: all, train, test (auto: test with a split, else all)", ("auto", "all", "train", "test")),
    Opt("method", str, "hybrid", "latent estimator", ("hybrid", "variational")),
    Opt("samples", int, 10, "hybrid lanes"),
    Opt("steps", int, 2000, "hybrid Adam steps"),
    Opt("lr", float, 0.001, "hybrid learning rate"),
    Opt("test_model", str, "", "test-neuron decoder; scores held-out neurons", path=True),
    SEED,
]


def _split_views(cfg: dict, y: np.ndarray):
    """Train-neuron rows, test-neuron rows and the selected bin range."""
    N, T = y.shape
    if cfg["split"]:
        s = fio.load_json(cfg["split"])
        try:
            train = np.asarray(s["train_neurons"], dtype=int)
            test = np.asarray(s["test_neurons"], dtype=int)
            tb = int(s["n_train_bins"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{cfg['split']}: not a split file") from None
        if s.get("n_neurons") != N or s.get("n_bins") != T:
            raise ConfigError("split file does not match the spike matrix")
    else:
        train, test, tb = np.arange(N), np.zeros(0, dtype=int), T
    which = cfg["bins"]
    if which == "auto":
        which = "test" if cfg["split"] else "all"
    bins = {"all": slice(0, T), "train": slice(0, tb), "test": slice(tb, T)}[which]
    return train, test, bins


def cmd_infer(cfg: dict, ctx: RunContext) -> None:
    from .evalkit import write_rows
    from .inference import hybrid_infer_lanes, infer_variational, predict_test_rates
    from .manifold import save_trajectory_csv
    from .model import FaeLVM

    _require(cfg, "model", "spikes")
    model = FaeLVM.load(cfg["model"])
    y = _load_spikes(cfg["spikes"])
    train, test, bins = _split_views(cfg, y)
    y_in = y[train, bins]
    summary: dict[str, Any] = {"method": cfg["method"], "n_bins": y_in.shape[1]}
    if cfg["method"] == "variational":
        z = infer_variational(model, y_in)
    else:
        res = hybrid_infer_lanes(model, y_in, cfg["samples"], cfg["steps"], cfg["lr"], np.random.default_rng([cfg["seed"], 3]))
        z = res.latents
        write_rows(ctx.out / "lanes.csv", [
            {"lane": m, "init_llh": float(res.init_llh[m]), "final_llh": float(res.lane_llh[m])} for m in range(len(res.lane_llh))
        ])
        for m in range(len(res.lane_llh)):
            log.info("lane %d: final LLH %.4f", m, res.lane_llh[m])
        summary.update(best_lane=res.best_lane, llh=float(res.lane_llh[res.best_lane]))
    save_trajectory_csv(ctx.out / "latents.csv", z)
    if cfg["test_model"]:
        if not len(test):
            raise ConfigError("scoring a test model needs a split with test neurons")
        test_dec = FaeLVM.load(cfg["test_model"])
        rates, nllh = predict_test_rates(test_dec, z, y[test, bins])
        fio.save_matrix_csv(ctx.out / "test_rates.csv", rates, prefix="bin")
        summary["test_nllh"] = nllh
    fio.dump_json(ctx.out / "infer.json", summary)


EVAL_OPTS = [
    Opt("metric", str, "ge", "ge, nllh, rank or spearman", ("ge", "nllh", "rank", "spearman")),
    Opt("truth", str, "", "ge: true trajectory CSV", path=True),
    Opt("inferred", str, "", "ge: inferred trajectory CSV", path=True),
    Opt("spaces", "strs", [], "ge: latent spaces of the trajectories (default: all circular)"),
    Opt("model", str, "", "nllh: decoder checkpoint", path=True),
    Opt("spikes", str, "", "nllh: spikes of the decoder's neurons", path=True),
    Opt("latents", str, "", "nllh: trajectory CSV", path=True),
    Opt("scores", str, "", "rank: CSV with a model column and one column per seed", path=True),
    Opt("table", str, "", "spearman: CSV table", path=True),
    Opt("x", str, "", "spearman: first column"),
    Opt("y", str, "", "spearman: second column"),
    Opt("svg", bool, False, "also write an SVG plot"),
]


def _read_table(path: str) -> tuple[list[str], list[list[str]]]:
    import csv

    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    if len(rows) < 2:
        raise FormatError(f"{path}: need a header and at least one row")
    return rows[0], rows[1:]


def _column(path: str, header: list[str], rows: list[list[str]], name: str) -> np.ndarray:
    if name not in header:
        raise ConfigError(f"{path}: no column {name!r}")
    j = header.index(name)
    try:
        return np.array([float(r[j]) for r in rows])
    except (IndexError, ValueError):
        raise FormatError(f"{path}: column {name!r} is not numeric") from None


def cmd_eval(cfg: dict, ctx: RunContext) -> None:
    from .evalkit import mean_rank, save_svg, spearman, write_rows

    metric = cfg["metric"]
    if metric == "ge":
        from .manifold import LatentTopology, align_trajectories, geodesic_distance

        _require(cfg, "truth", "inferred")
        truth, inferred = _load_trajectory(cfg["truth"]), _load_trajectory(cfg["inferred"])
        if truth.shape != inferred.shape:
            raise ConfigError(f"trajectory shapes differ: {truth.shape} vs {inferred.shape}")
        spaces = [LatentTopology.parse(s) for s in cfg["spaces"]] or None
        topo = LatentTopology.torus(truth.shape[1])
        if spaces:
            topo = spaces[0]
            for s in spaces[1:]:
                topo = topo + s
        aligned, transform = align_trajectories(truth, inferred, topo, spaces)
        err = geodesic_distance(aligned, truth, topo)
        write_rows(ctx.out / "eval.csv", [{"bin": t, "error": float(e)} for t, e in enumerate(err)])
        fio.dump_json(ctx.out / "eval.json", {"metric": "ge", "ge": float(err.mean()) if err.size else 0.0, "transform": transform})
        if cfg["svg"]:
            save_svg(ctx.out / "ge.svg", "line", np.arange(len(err)), err, title="geodesic error per bin")
    elif metric == "nllh":
        from .inference import predict_test_rates, rates_nllh
        from .model import FaeLVM

        _require(cfg, "model", "spikes", "latents")
        model = FaeLVM.load(cfg["model"])
        y = _load_spikes(cfg["spikes"])
        _, nllh = predict_test_rates(model, _load_trajectory(cfg["latents"]), y)
        baseline = rates_nllh(y, np.broadcast_to(np.maximum(y.mean(axis=1, keepdims=True), 1e-12), y.shape))
        write_rows(ctx.out / "eval.csv", [{"predictor": "model", "nllh": nllh}, {"predictor": "mean_rate", "nllh": baseline}])
        fio.dump_json(ctx.out / "eval.json", {"metric": "nllh", "nllh": nllh, "mean_rate_nllh": baseline})
    elif metric == "rank":
        _require(cfg, "scores")
        header, rows = _read_table(cfg["scores"])
        names = [r[0] for r in rows]
        try:
            scores = np.array([[float(v) for v in r[1:]] for r in rows])
        except ValueError:
            raise FormatError(f"{cfg['scores']}: scores must be numeric") from None
        ranks = mean_rank(scores)
        write_rows(ctx.out / "eval.csv", [{"model": n, "mean_rank": float(r)} for n, r in zip(names, ranks)])
        fio.dump_json(ctx.out / "eval.json", {"metric": "rank", "mean_rank": dict(zip(names, ranks.tolist()))})
    else:
        _require(cfg, "table", "x", "y")
        header, rows = _read_table(cfg["table"])
        x = _column(cfg["table"], header, rows, cfg["x"])
        yv = _column(cfg["table"], header, rows, cfg["y"])
        rho, p = spearman(x, yv)
        write_rows(ctx.out / "eval.csv", [{"x": cfg["x"], "y": cfg["y"], "rho": rho, "p": p, "n": len(x)}])
        fio.dump_json(ctx.out / "eval.json", {"metric": "spearman", "rho": rho, "p": p, "n": len(x)})
        if cfg["svg"]:
            save_svg(ctx.out / "spearman.svg", "scatter", x, yv, title=f"{cfg['y']} vs {cfg['x']}")


RATEMAP_OPTS = [
    Opt("spikes", str, "", "activity matrix (neurons x bins)", path=True),
    Opt("coords", str, "", "trajectory CSV; the first two columns are used", path=True),
    Opt("n_bins", int, 50, "bins per axis"),
    Opt("smooth_sd", float, 2.75, "Gaussian smoothing sd in bins (0: off)"),
    Opt("circular", bool, False, "both axes are angles (wraparound smoothing)"),
    Opt("neurons", "ints", [], "neurons to map (default: all)"),
    Opt("svg", bool, False, "also write an SVG per neuron"),
]


def cmd_ratemap(cfg: dict, ctx: RunContext) -> None:
    from .evalkit import rate_map, save_svg, spatial_information, write_rows

    _require(cfg, "spikes", "coords")
    y = _load_spikes(cfg["spikes"])
    xy = _load_trajectory(cfg["coords"])
    if xy.shape[1] < 2:
        raise ConfigError("rate maps need at least two coordinate columns")
    neurons = cfg["neurons"] or list(range(y.shape[0]))
    if min(neurons) < 0 or max(neurons) >= y.shape[0]:
        raise ConfigError("neuron index out of range")
    rm = rate_map(y[neurons], xy[:, :2], cfg["n_bins"], cfg["smooth_sd"], circular=cfg["circular"])
    maps_dir = ctx.out / "ratemaps"
    maps_dir.mkdir(exist_ok=True)
    fio.save_matrix_csv(ctx.out / "occupancy.csv", rm.occupancy, prefix="y", index="x")
    rows = []
    for r, i in zip(rm.rates, neurons):
        fio.save_matrix_csv(maps_dir / f"neuron_{i}.csv", r, prefix="y", index="x")
        rows.append({"neuron_id": i, "spatial_information": spatial_information(r, rm.occupancy)})
        if cfg["svg"]:
            save_svg(maps_dir / f"neuron_{i}.svg", "image", r.T, title=f"neuron {i}")
    write_rows(ctx.out / "spatial_information.csv", rows)


ENSEMBLE_OPTS = [
    Opt("spikes", str, "", "spike matrix", path=True),
    Opt("k", int, 2, "number of ensembles (one circular latent each)"),
    Opt("labels", str, "", "true labels CSV; enables accuracy and chance level", path=True),
    Opt("latents", str, "", "true latents CSV; enables the supervised MI baseline", path=True),
    Opt("n_fits", int, 5, "model fits; the highest train LLH is used"),
    Opt("baselines", bool, True, "also run the PCA + k-means baselines"),
    Opt("greedy", bool, False, "also report the greedy one-hot assignment"),
    Opt("chance_draws", int, 100_000, "random labelings for the chance level"),
    *_with_defaults([o for o in MODEL_OPTS if o.key != "spaces"], nonlinearity="exp", learn_coeff=True),
    *_with_defaults(TRAIN_OPTS, learning_rate=0.01, num_worse=10),
    SEED,
]


def cmd_ensembles(cfg: dict, ctx: RunContext) -> None:
    from .ensembles import (
        assign_hard,
        chance_level,
        cov_pca_baseline,
        greedy_assign,
        matched_accuracy,
        mi_supervised_baseline,
        raw_pca_baseline,
    )
    from .evalkit import write_rows
    from .manifold import LatentTopology
    from .training import multi_seed_fit

    _require(cfg, "spikes")
    y = _load_spikes(cfg["spikes"])
    k = cfg["k"]
    truth = fio.load_labels_csv(cfg["labels"]) if cfg["labels"] else None
    if truth is not None and len(truth) != y.shape[0]:
        raise ConfigError("label count does not match the spike matrix")
    seed = cfg["seed"]
    mc = _model_config({**cfg, "spaces": [str(LatentTopology.circle())] * k})
    seeds = [seed * 1000 + i for i in range(cfg["n_fits"])]
    best, results = multi_seed_fit(y, mc, _train_config(cfg), cfg["n_fits"], threads=ctx.threads, seeds=seeds)
    w = best.model.ensemble_weights()
    labels = {"faeLVM": assign_hard(w)}
    if cfg["greedy"]:
        labels["greedy"] = greedy_assign(best.model, y)
    if cfg["baselines"]:
        labels["raw_pca"] = raw_pca_baseline(y, k, seed=seed)
        labels["cov_pca"] = cov_pca_baseline(y, k, seed=seed)
        if cfg["latents"]:
            labels["supervised"] = mi_supervised_baseline(y, _load_trajectory(cfg["latents"]), k, seed=seed)
    fio.save_labels_csv(ctx.out / "labels.csv", labels["faeLVM"])
    for name, lab in labels.items():
        if name != "faeLVM":
            fio.save_labels_csv(ctx.out / f"labels_{name}.csv", lab)
    fio.save_matrix_csv(ctx.out / "weights.csv", w, prefix="ensemble")
    fits = []
    for r in results:
        row = {"seed": r.seed, "train_llh": r.train_llh}
        if truth is not None:
            row["accuracy"] = matched_accuracy(assign_hard(r.model.ensemble_weights()), truth)
        fits.append(row)
    write_rows(ctx.out / "fits.csv", fits)
    report: dict[str, Any] = {"best_seed": best.seed, "train_llh": best.train_llh, "row_max": float(w.max(axis=1).mean())}
    if truth is not None:
        report["accuracy"] = {name: matched_accuracy(lab, truth) for name, lab in labels.items()}
        report["chance"] = chance_level(truth, max(k, int(truth.max()) + 1), cfg["chance_draws"], seed=seed)
    fio.dump_json(ctx.out / "report.json", report)


HYPERSEARCH_OPTS = [
    Opt("spikes", str, "", "spike matrix (default: simulate the default ring population)", path=True),
    Opt("n", int, 30, "simulated neurons"),
    Opt("t", int, 1000, "simulated bins"),
    Opt("space", str, "", "JSON file with search ranges (default: built-in ranges)", path=True),
    Opt("n_samples", int, 50, "configurations to draw"),
    Opt("n_seeds", int, 3, "fits per configuration"),
    Opt("budget", float, 0.0, "seconds after which no new configuration starts (0: none; makes output machine dependent)"),
    Opt("max_epochs", int, 100, "epoch cap per fit"),
    Opt("test_frac", float, 0.5, "held-out bin fraction"),
    Opt("test_neuron_frac", float, 0.5, "held-out neuron fraction"),
    SEED,
]


class HeldOutEvaluator:
    """Test-neuron log-likelihood on held-out bins for one search configuration."""

    def __init__(self, y: np.ndarray, split, max_epochs: int):
        self.y = y
        self.split = split
        self.max_epochs = max_epochs

    def __call__(self, config: dict, seed: int) -> float:
        from .evalkit import configs_from_search
        from .inference import infer_variational, predict_test_rates
        from .training import TrainConfig, fit, fit_test_neurons

        mc, tc = configs_from_search(config)
        tc = TrainConfig(**{**tc.to_dict(), "seed": seed, "max_epochs": self.max_epochs})
        sp, y = self.split, self.y
        tb = sp.n_train_bins
        res = fit(y[sp.train_neurons, :tb], mc, tc)
        test = fit_test_neurons(res.model, infer_variational(res.model, y[sp.train_neurons, :tb]), y[sp.test_neurons, :tb], seed=seed)
        z = infer_variational(res.model, y[sp.train_neurons, tb:])
        return -predict_test_rates(test, z, y[sp.test_neurons, tb:])[1]


def cmd_hypersearch(cfg: dict, ctx: RunContext) -> None:
    from .datagen import SynthConfig, generate_ring_ensemble
    from .evalkit import hypersearch
    from .experiments import split_data

    if cfg["spikes"]:
        y = _load_spikes(cfg["spikes"])
    else:
        y, _ = generate_ring_ensemble(SynthConfig(n_neurons=cfg["n"], n_bins=cfg["t"], seed=cfg["seed"]))
    N, T = y.shape
    sp = split_data(N, T, int(round(cfg["test_neuron_frac"] * N)), int(round(cfg["test_frac"] * T)), cfg["seed"])
    if not len(sp.test_neurons) or sp.n_train_bins == T:
        raise ConfigError("the search needs held-out neurons and bins")
    space = fio.load_json(cfg["space"]) if cfg["space"] else None
    result = hypersearch(
        HeldOutEvaluator(y, sp, cfg["max_epochs"]),
        space,
        cfg["n_samples"],
        cfg["n_seeds"],
        cfg["seed"],
        cfg["budget"] or None,
        ctx.threads,
    )
    result.write(ctx.out)


TABLE1_OPTS = [
    Opt("cell", str, "30x1000", "training neurons x training bins"),
    Opt("n_test", int, 30, "held-out neurons"),
    Opt("t_test", int, 1000, "held-out bins"),
    Opt("seeds", int, 20, "data seeds, starting at --seed"),
    Opt("decoders", "strs", ["b", "s", "n"], "decoder variants", ("b", "s", "n", "bump", "shared_basis", "free_basis")),
    Opt("n_init", int, 5, "fits per variant and seed; the highest train LLH is kept"),
    Opt("samples", int, 10, "hybrid lanes"),
    Opt("steps", int, 2000, "hybrid Adam steps"),
    Opt("hybrid_lr", float, 0.001, "hybrid learning rate"),
    Opt("learning_rate", float, 0.01, "training learning rate"),
    Opt("chunk_length", int, 128, "training chunk length"),
    Opt("batch_size", int, 1, "training batch size"),
    Opt("num_worse", int, 10, "early-stopping patience (epochs)"),
    SEED,
]


def _parse_cell(cell: str) -> tuple[int, int]:
    try:
        n, t = (int(v) for v in cell.lower().split("x"))
    except ValueError:
        raise ConfigError(f"cell must look like 30x1000, got {cell!r}") from None
    if n < 1 or t < 2:
        raise ConfigError("cell needs at least one neuron and two bins")
    return n, t


def cmd_repro_table1(cfg: dict, ctx: RunContext) -> None:
    from .evalkit import write_rows
    from .experiments import HeldOutConfig, run_heldout
    from .model import VARIANT_ALIASES

    n, t = _parse_cell(cfg["cell"])
    hc = HeldOutConfig(
        n_train=n,
        t_train=t,
        n_test=cfg["n_test"],
        t_test=cfg["t_test"],
        decoders=tuple(VARIANT_ALIASES.get(d, d) for d in cfg["decoders"]),
        n_init=cfg["n_init"],
        hybrid_samples=cfg["samples"],
        hybrid_steps=cfg["steps"],
        hybrid_lr=cfg["hybrid_lr"],
        learning_rate=cfg["learning_rate"],
        chunk_length=cfg["chunk_length"],
        batch_size=cfg["batch_size"],
        num_worse=cfg["num_worse"],
    )
    seeds = range(cfg["seed"], cfg["seed"] + cfg["seeds"])
    rows, summary = run_heldout(seeds, hc, ctx.threads)
    write_rows(ctx.out / "table1.csv", rows + summary)
    by = {(r["model"], r["seed"]): r for r in rows}
    wins = {}
    for d in hc.decoders:
        tag = {"bump": "b", "shared_basis": "s", "free_basis": "n"}[d]
        wins["fae-" + tag] = sum(by[("fae-" + tag, s)]["nllh"] < by[("v-fae-" + tag, s)]["nllh"] for s in seeds)
    fio.dump_json(ctx.out / "summary.json", {"cell": cfg["cell"], "summary": summary, "hybrid_wins": wins, "n_seeds": len(seeds)})


FIG4_OPTS = [
    Opt("t", "ints", [250, 500, 1000], "time-bin counts"),
    Opt("reps", int, 10, "repetitions (data seeds, starting at --seed)"),
    Opt("k", int, 2, "ensembles"),
    Opt("n_per", int, 30, "neurons per ensemble"),
    Opt("n_fits", int, 5, "fits per repetition"),
    Opt("chance_draws", int, 100_000, "random labelings for the chance level"),
    Opt("learning_rate", float, 0.01, "training learning rate"),
    Opt("chunk_length", int, 128, "training chunk length"),
    Opt("batch_size", int, 1, "training batch size"),
    Opt("num_worse", int, 10, "early-stopping patience (epochs)"),
    Opt("svg", bool, False, "also write an accuracy-vs-T SVG"),
    SEED,
]


def cmd_repro_fig4(cfg: dict, ctx: RunContext) -> None:
    from .evalkit import save_svg, write_rows
    from .experiments import EnsembleConfig, run_ensembles

    acc_rows, fit_rows, summary = [], [], {}
    reps = range(cfg["seed"], cfg["seed"] + cfg["reps"])
    for T in cfg["t"]:
        ec = EnsembleConfig(
            n_per_ensemble=cfg["n_per"],
            n_ensembles=cfg["k"],
            n_bins=T,
            n_fits=cfg["n_fits"],
            chance_draws=cfg["chance_draws"],
            learning_rate=cfg["learning_rate"],
            chunk_length=cfg["chunk_length"],
            batch_size=cfg["batch_size"],
            num_worse=cfg["num_worse"],
        )
        out = run_ensembles(reps, ec, ctx.threads)
        for r in out:
            for method, a in r.accuracy.items():
                acc_rows.append({"n_bins": T, "rep": r.rep, "method": method, "accuracy": a})
            acc_rows.append({"n_bins": T, "rep": r.rep, "method": "chance", "accuracy": r.chance})
            fit_rows.extend(r.fits)
        methods = list(out[0].accuracy) + ["chance"]
        summary[str(T)] = {
            m: float(np.mean([row["accuracy"] for row in acc_rows if row["n_bins"] == T and row["method"] == m])) for m in methods
        }
    write_rows(ctx.out / "fig4.csv", acc_rows)
    write_rows(ctx.out / "fits.csv", fit_rows)
    fio.dump_json(ctx.out / "summary.json", {"mean_accuracy": summary})
    if cfg["svg"]:
        ts = cfg["t"]
        for m in summary[str(ts[0])]:
            save_svg(ctx.out / f"accuracy_{m}.svg", "line", ts, [summary[str(t)][m] for t in ts], title=f"{m} accuracy vs T")


@dataclass(frozen=True)
class Command:
    name: str
    options: list[Opt]
    run: Callable[[dict, RunContext], None]
    help: str


COMMANDS = {
    c.name: c
    for c in [
        Command("simulate", SIMULATE_OPTS, cmd_simulate, "generate synthetic spikes, latents and labels"),
        Command("fit", FIT_OPTS, cmd_fit, "train a model on a spike matrix"),
        Command("infer", INFER_OPTS, cmd_infer, "infer latents with a trained model"),
        Command("ensembles", ENSEMBLE_OPTS, cmd_ensembles, "detect ensembles and run baseline clusterings"),
        Command("eval", EVAL_OPTS, cmd_eval, "geodesic error, NLLH, mean rank or Spearman correlation"),
        Command("ratemap", RATEMAP_OPTS, cmd_ratemap, "rate maps and spatial information over 2-D coordinates"),
        Command("hypersearch", HYPERSEARCH_OPTS, cmd_hypersearch, "random hyperparameter search"),
        Command("repro-table1", TABLE1_OPTS, cmd_repro_table1, "held-out-neuron comparison of inference methods"),
        Command("repro-fig4", FIG4_OPTS, cmd_repro_fig4, "ensemble detection accuracy versus recording length"),
    ]
}


# -- argument parsing --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag_type(opt: Opt):
    def conv(s: str):
        try:
            return _coerce(opt, s)
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return conv


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", help="JSON option file or a previous run's manifest.json; flags override it")
    g.add_argument("--out", help="output directory (default: ./faelvm-<command>)")
    g.add_argument("--threads", type=int, help="worker processes (default: $FAELVM_THREADS or 1)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="faelvm", description="Manifold latent variable models of neural population spiking.")
    parser.add_argument("--version", action="version", version=f"faelvm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for cmd in COMMANDS.values():
        p = sub.add_parser(cmd.name, parents=[common], help=cmd.help, description=cmd.help)
        for o in cmd.options:
            default = "" if o.default is None else o.default
            if isinstance(default, list):
                default = ",".join(map(str, default))
            if o.kind is bool:
                p.add_argument(o.flag, dest=o.key, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                               help=f"{o.help} (default: {o.default})")
            else:
                p.add_argument(o.flag, dest=o.key, type=_flag_type(o), default=argparse.SUPPRESS, metavar=o.key.upper(),
                               help=f"{o.help} (default: {default if default != '' else 'none'})")
    return parser


def resolve_config(command: Command, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {o.key: o.default for o in command.options}
    opts = {o.key: o for o in command.options}
    if ns.config:
        d = fio.load_json(ns.config)
        if not isinstance(d, dict):
            raise ConfigError(f"{ns.config}: expected a JSON object")
        if "command" in d and "config" in d:
            if d["command"] != command.name:
                raise ConfigError(f"{ns.config} is a manifest for {d['command']!r}, not {command.name!r}")
            d = d["config"]
        unknown = sorted(set(d) - set(opts))
        if unknown:
            raise ConfigError(f"{ns.config}: unknown option(s) {unknown}")
        for k, v in d.items():
            cfg[k] = None if v is None else _coerce(opts[k], v)
    for k in opts:
        if k in vars(ns):
            cfg[k] = getattr(ns, k)
    return cfg


def _threads(ns: argparse.Namespace) -> int:
    if ns.threads is not None:
        n = ns.threads
    else:
        env = os.environ.get("FAELVM_THREADS", "")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"FAELVM_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("threads must be >= 1")
    return n


def _report(exc: BaseException, code: int, out: Path | None) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            fio.dump_json(out / "error.json", payload)
        except OSError:
            pass


def main(argv: list[str] | None = None) -> int:
    out: Path | None = None
    try:
        ns = build_parser().parse_args(argv)
        if ns.verbose:
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
        command = COMMANDS[ns.command]
        out = Path(ns.out or f"faelvm-{command.name}")
        cfg = resolve_config(command, ns)
        threads = _threads(ns)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        fio.dump_json(out / "manifest.json", {
            "command": command.name,
            "config": cfg,
            "version": version_string(),
            "format": MANIFEST_FORMAT,
        })
        t0 = time.perf_counter()
        command.run(cfg, RunContext(out, threads, bool(cfg.get("svg", False))))
        fio.dump_json(out / "timing.json", {"wall_clock_s": time.perf_counter() - t0, "threads": threads})
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        code = exit_code_for(exc)
        if code == EXIT_FAILURE:
            log.exception("unexpected failure")
        _report(exc, code, out)
        return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
