"""Command-line entry point.

One executable, seven subcommands, all emitting plain-text artifacts:

  train             fit the VAE (boltzmann or gaussian prior) on a dataset
  eval              embed a dataset with a checkpoint and score it
  maxcut            solve Moebius-ladder max-cut instances with annealing
  validate-sampler  fidelity report for a sampler against a random machine
  stability         repeated batched annealing with a success time series
  serve             run the TCP sampler service
  synth             write a synthetic expression dataset

Configuration precedence is flags > config file > built-in defaults.  The
config file is flat ``key=value`` text using the option names below with
underscores (``lr_vae=0.01``).  Every artifact-writing run records the fully
resolved configuration plus library versions in ``manifest.txt`` in the
output directory; manifests carry no timestamps, so a rerun of the same
command is reproducible byte for byte (wall-clock columns in the CSVs
excepted).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import energy as en
from .dataio import (ExpressionDataset, load_csv, load_mtx, normalize_log1p,
                     qc_filter, save_csv, select_hvg, split, synthesize)
from .model import (TrainConfig, embed, load_model, new_model, save_history,
                    save_model, train)
from .rng import derive_seed
from .samplers import (AnnealSchedule, boltzmann_fidelity, default_schedule,
                       empirical_tv_distance, exact_sampler, gibbs_sample,
                       simulated_annealing, stability_harness)
from .scmetrics import (ami, ari, classify_knn_cv, fmi, graph_connectivity,
                        ilisi, kmeans, knet_entropy, knn_graph, nmi, pca,
                        pcr_r2)
from .service import DEFAULT_MAX_PROBLEM, serve
from .textio import fmt, write_csv


class UsageError(Exception):
    """Bad invocation (unknown key, missing input, invalid size): exit 2."""


# ------------------------------------------------------- option machinery


@dataclass(frozen=True)
class _Opt:
    name: str                 # argparse dest, config-file key, manifest key
    flag: str
    kind: type                # bool, int, float, or str
    default: object
    help: str = ""
    choices: tuple | None = None


def _add_opts(sp: argparse.ArgumentParser, opts: list) -> None:
    for o in opts:
        if o.kind is bool:
            sp.add_argument(o.flag, dest=o.name, action="store_const",
                            const=True, default=None, help=o.help)
        else:
            sp.add_argument(o.flag, dest=o.name, type=o.kind, default=None,
                            choices=o.choices, help=o.help)


def _convert(o: _Opt, raw: str, where: str):
    if o.kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{where}: boolean key {o.name!r} got {raw!r}")
    try:
        value = o.kind(raw)
    except ValueError:
        raise UsageError(
            f"{where}: key {o.name!r} expects {o.kind.__name__}, got {raw!r}") from None
    if o.choices is not None and value not in o.choices:
        raise UsageError(
            f"{where}: key {o.name!r} must be one of {o.choices}, got {value!r}")
    return value


def _read_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"missing input path: {path}")
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            entries[key.strip()] = value.strip()
    return entries


def _resolve(opts: list, args: argparse.Namespace) -> dict:
    """Defaults, then config-file entries, then explicitly passed flags."""
    by_name = {o.name: o for o in opts}
    values = {o.name: o.default for o in opts}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        for key, raw in _read_config_file(config_path).items():
            if key not in by_name or key == "config":
                raise UsageError(f"{config_path}: unknown config key {key!r}")
            values[key] = _convert(by_name[key], raw, config_path)
    for o in opts:
        flag_value = getattr(args, o.name)
        if flag_value is not None:
            values[o.name] = flag_value
    return values


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, str):
        return value
    return fmt(value)


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("qbmvae")
    except Exception:
        return "unknown"


def _write_manifest(out_dir: str, subcommand: str, values: dict) -> None:
    import numba
    import scipy
    lines = [f"subcommand={subcommand}"]
    for key in sorted(values):
        lines.append(f"{key}={_render(values[key])}")
    lines.append(f"version.numba={numba.__version__}")
    lines.append(f"version.numpy={np.__version__}")
    lines.append(f"version.python={platform.python_version()}")
    lines.append(f"version.qbmvae={_package_version()}")
    lines.append(f"version.scipy={scipy.__version__}")
    with open(os.path.join(out_dir, "manifest.txt"), "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _ensure_out(values: dict) -> str:
    out = values.get("out")
    if not out:
        raise UsageError("--out is required")
    os.makedirs(out, exist_ok=True)
    return out


# ----------------------------------------------------------- shared opts

_COMMON = [
    _Opt("config", "--config", str, None, "flat key=value config file"),
    _Opt("out", "--out", str, None, "output directory"),
    _Opt("seed", "--seed", int, 0, "master seed"),
]

_SYNTH_KNOBS = [
    _Opt("cells", "--cells", int, 2000, "synthetic cell count"),
    _Opt("genes", "--genes", int, 200, "synthetic gene count"),
    _Opt("types", "--types", int, 4, "synthetic cell-type count"),
    _Opt("batches", "--batches", int, 2, "synthetic batch count"),
    _Opt("separation", "--separation", float, 1.0,
         "type-profile spread multiplier"),
    _Opt("batch_strength", "--batch-strength", float, 0.5,
         "batch-effect magnitude"),
]

_DATA_OPTS = [
    _Opt("dataset", "--dataset", str, None,
         "expression table (.csv, or .mtx with a <stem>_labels.csv sidecar)"),
    _Opt("synthetic", "--synthetic", bool, False,
         "generate a synthetic dataset instead of reading one"),
    *_SYNTH_KNOBS,
    _Opt("qc", "--qc", bool, False,
         "apply gene/count QC filters before normalizing"),
    _Opt("hvg", "--hvg", int, 0, "keep the top-N variable genes (0 = all)"),
]

_SCHEDULE_OPTS = [
    _Opt("t_start", "--t-start", float, 10.0, "annealing start temperature"),
    _Opt("t_end", "--t-end", float, 0.05, "annealing end temperature"),
    _Opt("sweeps", "--sweeps", int, 0,
         "annealing sweeps (0 = default 50 per spin)"),
    _Opt("shape", "--shape", str, "geometric", "cooling shape",
         ("geometric", "linear")),
]

TRAIN_OPTS = _COMMON + _DATA_OPTS + [
    _Opt("prior", "--prior", str, "boltzmann", "latent prior",
         ("boltzmann", "gaussian")),
    _Opt("latent", "--latent", int, 16, "latent units"),
    _Opt("hidden", "--hidden", int, 256, "encoder/decoder hidden width"),
    _Opt("n_hidden_bm", "--n-hidden-bm", int, 0, "hidden prior units"),
    _Opt("lr_vae", "--lr-vae", float, 1e-2, "encoder/decoder learning rate"),
    _Opt("lr_bm", "--lr-bm", float, 1e-3, "prior learning rate"),
    _Opt("patience", "--patience", int, 10, "early-stopping patience"),
    _Opt("max_epochs", "--max-epochs", int, 500, "epoch cap"),
    _Opt("minibatch", "--minibatch", int, 128, "minibatch size"),
    _Opt("neg_samples", "--neg-samples", int, 100,
         "negative-phase samples per update"),
    _Opt("sampler", "--sampler", str, "gibbs", "negative-phase sampler",
         ("gibbs", "exact", "sa", "service")),
    _Opt("gibbs_sweeps", "--gibbs-sweeps", int, 1, "sweeps between samples"),
    _Opt("burn_in", "--burn-in", int, 100, "discarded leading sweeps"),
    _Opt("chains", "--chains", int, 16, "parallel Gibbs chains"),
    _Opt("temperature", "--temperature", float, 1.0, "sampling temperature"),
    _Opt("service_address", "--service-address", str, "127.0.0.1:7700",
         "host:port of the sampler service"),
    _Opt("val_frac", "--val-frac", float, 0.1, "validation fraction"),
]

EVAL_OPTS = _COMMON + _DATA_OPTS + [
    _Opt("checkpoint", "--checkpoint", str, None, "model checkpoint path"),
    _Opt("embedding", "--embedding", str, "q", "latent representation",
         ("q", "zeta", "binary")),
    _Opt("knn_k", "--knn-k", int, 15, "neighborhood size for graph metrics"),
    _Opt("clusters", "--clusters", int, 0,
         "k-means cluster count (0 = number of cell types)"),
    _Opt("folds", "--folds", int, 5, "cross-validation folds"),
    _Opt("restarts", "--restarts", int, 10, "k-means restarts"),
]

MAXCUT_OPTS = _COMMON + [
    _Opt("sizes", "--sizes", str, "8,12,16",
         "comma-separated even ladder sizes"),
    _Opt("runs", "--runs", int, 20, "independent annealing runs per size"),
    *_SCHEDULE_OPTS,
]

VALIDATE_OPTS = _COMMON + [
    _Opt("n", "--n", int, 12, "machine size (<= 20, exact enumeration)"),
    _Opt("sampler", "--sampler", str, "gibbs", "sampler under test",
         ("gibbs", "exact", "sa")),
    _Opt("samples", "--samples", int, 100000, "samples to draw"),
    _Opt("scale", "--scale", float, 0.5, "coupling scale of the random machine"),
    _Opt("kt", "--kt", float, 1.0, "regression temperature kT"),
    _Opt("gibbs_sweeps", "--gibbs-sweeps", int, 1, "sweeps between samples"),
    _Opt("burn_in", "--burn-in", int, 100, "discarded leading sweeps"),
    _Opt("chains", "--chains", int, 16, "parallel Gibbs chains"),
    _Opt("temperature", "--temperature", float, 1.0, "sampling temperature"),
]

STABILITY_OPTS = _COMMON + [
    _Opt("n", "--n", int, 4, "Moebius ladder size"),
    _Opt("duration", "--duration", float, 60.0, "total run seconds"),
    _Opt("interval", "--interval", float, 10.0, "seconds between batches"),
    _Opt("batch", "--batch", int, 512, "annealing runs per batch"),
    _Opt("cut_target", "--cut-target", int, 0,
         "target cut (0 = brute force for n <= 20)"),
    *_SCHEDULE_OPTS,
]

SERVE_OPTS = [
    _Opt("config", "--config", str, None, "flat key=value config file"),
    _Opt("out", "--out", str, None,
         "optional directory for a manifest of the resolved config"),
    _Opt("host", "--host", str, "127.0.0.1", "bind address"),
    _Opt("port", "--port", int, 7700, "bind port (0 = ephemeral)"),
    _Opt("max_problem", "--max-problem", int, DEFAULT_MAX_PROBLEM,
         "largest accepted problem size"),
    _Opt("workers", "--workers", int, 8, "advisory worker count"),
]

SYNTH_OPTS = _COMMON + _SYNTH_KNOBS


# ------------------------------------------------------------ data plumbing


def _load_dataset(values: dict) -> ExpressionDataset:
    if values["synthetic"]:
        ds = synthesize(n_cells=values["cells"], n_genes=values["genes"],
                        n_types=values["types"], n_batches=values["batches"],
                        seed=values["seed"],
                        batch_strength=values["batch_strength"],
                        separation=values["separation"])
    else:
        path = values["dataset"]
        if not path:
            raise UsageError("either --dataset or --synthetic is required")
        if not os.path.exists(path):
            raise UsageError(f"missing input path: {path}")
        if path.endswith(".mtx"):
            ds = load_mtx(path, path[:-4] + "_labels.csv")
        else:
            ds = load_csv(path)
    if values.get("qc") and not ds.normalized:
        ds = qc_filter(ds)
    if not ds.normalized:
        ds = normalize_log1p(ds)
    if values.get("hvg", 0):
        ds = select_hvg(ds, values["hvg"])
    return ds


def _schedule_for(n_spins: int, values: dict) -> AnnealSchedule:
    if values["sweeps"] > 0:
        return AnnealSchedule(values["t_start"], values["t_end"],
                              values["sweeps"], values["shape"])
    return default_schedule(n_spins)


def _ladder_cut_target(g: en.Graph, values: dict) -> int:
    if values.get("cut_target"):
        return values["cut_target"]
    if g.n_vertices <= 20:
        return brute_force_cut(g)
    if g.n_vertices == 1000:
        return 1498
    raise UsageError("provide --cut-target for ladders larger than 20 nodes")


def brute_force_cut(g: en.Graph) -> int:
    best, _ = en.brute_force_max_cut(g)
    return best


# ------------------------------------------------------------- subcommands


def cmd_train(args: argparse.Namespace) -> int:
    v = _resolve(TRAIN_OPTS, args)
    out = _ensure_out(v)
    ds = _load_dataset(v)
    train_ds, val_ds = split(ds, v["val_frac"], seed=v["seed"])
    model = new_model(ds.n_genes, v["latent"], ds.n_batches,
                      hidden=v["hidden"], prior=v["prior"],
                      n_hidden_bm=v["n_hidden_bm"], seed=v["seed"])
    config = TrainConfig(
        lr_vae=v["lr_vae"], lr_bm=v["lr_bm"], patience=v["patience"],
        max_epochs=v["max_epochs"], minibatch_size=v["minibatch"],
        n_negative_samples=v["neg_samples"], sampler_choice=v["sampler"],
        gibbs_sweeps=v["gibbs_sweeps"], gibbs_burn_in=v["burn_in"],
        gibbs_chains=v["chains"], temperature=v["temperature"],
        service_address=v["service_address"], seed=v["seed"])
    best, history = train(train_ds, val_ds, model, config)
    save_model(os.path.join(out, "model.txt"), best)
    save_history(os.path.join(out, "history.csv"), history)
    _write_manifest(out, "train", v)
    val_elbos = [row[7] for row in history if row[1] == "val"]
    print(f"trained {len(val_elbos)} epochs, best val elbo "
          f"{max(val_elbos):.6g}; wrote {out}/model.txt, {out}/history.csv")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    v = _resolve(EVAL_OPTS, args)
    out = _ensure_out(v)
    ckpt = v["checkpoint"]
    if not ckpt:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(ckpt):
        raise UsageError(f"missing input path: {ckpt}")
    model = load_model(ckpt)
    ds = _load_dataset(v)
    emb = embed(ds, model, v["embedding"])

    rows = []
    k = min(v["knn_k"], ds.n_cells - 1)
    graph = knn_graph(emb, k)
    if ds.celltype is not None:
        labels = np.asarray(ds.celltype)
        n_clusters = v["clusters"] or len(set(labels.tolist()))
        km = kmeans(emb, n_clusters, n_restarts=v["restarts"], seed=v["seed"])
        rows.append(("ari", ari(labels, km), "higher"))
        rows.append(("ami", ami(labels, km), "higher"))
        rows.append(("nmi", nmi(labels, km), "higher"))
        rows.append(("fmi", fmi(labels, km), "higher"))
        acc, _, _, f1 = classify_knn_cv(emb, labels, k_neighbors=k,
                                        folds=v["folds"], seed=v["seed"])
        rows.append(("knn_accuracy", acc, "higher"))
        rows.append(("knn_macro_f1", f1, "higher"))
        rows.append(("knet_entropy", knet_entropy(graph, labels), "lower"))
        rows.append(("graph_connectivity",
                     graph_connectivity(graph.symmetrize(), labels), "higher"))
        sanity_labels = km
    else:
        rows.append(("warning", "no celltype labels: conservation metrics skipped", ""))
        sanity_labels = ds.batch
    if ds.n_batches >= 2:
        rows.append(("ilisi", ilisi(graph, ds.batch), "higher"))
        _, explained, scores = pca(emb, min(50, emb.shape[0], emb.shape[1]))
        rows.append(("pcr_r2", pcr_r2(scores, explained, ds.batch), "lower"))
    else:
        rows.append(("warning", "single batch: mixing metrics skipped", ""))
    # a partition compared against itself must score ARI exactly 1
    rows.append(("ari_self", ari(sanity_labels, sanity_labels), "sanity"))

    write_csv(os.path.join(out, "metrics.csv"),
              ["metric", "value", "direction"], rows)
    _write_manifest(out, "eval", v)
    print(f"wrote {out}/metrics.csv ({len(rows)} rows)")
    return 0


def cmd_maxcut(args: argparse.Namespace) -> int:
    v = _resolve(MAXCUT_OPTS, args)
    out = _ensure_out(v)
    try:
        sizes = [int(tok) for tok in v["sizes"].split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"bad --sizes value: {v['sizes']!r}") from None
    if not sizes:
        raise UsageError("--sizes is empty")
    rows = []
    for n in sizes:
        if n % 2 or n < 4:
            raise UsageError(f"ladder size must be even and >= 4, got {n}")
        g = en.mobius_ladder(n)
        problem = en.maxcut_to_ising(g)
        schedule = _schedule_for(problem.n_spins, v)
        t0 = time.perf_counter()
        best_sigma, _, finals = simulated_annealing(
            problem, schedule, v["runs"], derive_seed(v["seed"], n))
        wall_per_solve = (time.perf_counter() - t0) / v["runs"]
        best_cut = en.cut_value(g, best_sigma)
        run_cuts = np.array([en.cut_value(g, s) for s in finals.samples])
        if n <= 20:
            optimum = brute_force_cut(g)
        elif n == 1000:
            optimum = 1498
        else:
            optimum = None
        target = best_cut if optimum is None else optimum
        success = float(np.mean(run_cuts == target))
        rows.append((n, v["runs"], best_cut,
                     "" if optimum is None else optimum, success,
                     wall_per_solve))
    write_csv(os.path.join(out, "maxcut.csv"),
              ["n", "runs", "best_cut", "optimum", "success_fraction",
               "wall_s_per_solve"], rows)
    _write_manifest(out, "maxcut", v)
    summary = ", ".join(f"n={r[0]} cut={r[2]}" for r in rows)
    print(f"wrote {out}/maxcut.csv ({summary})")
    return 0


def cmd_validate_sampler(args: argparse.Namespace) -> int:
    v = _resolve(VALIDATE_OPTS, args)
    out = _ensure_out(v)
    if not 1 <= v["n"] <= 20:
        raise UsageError(f"--n must lie in 1..20 for exact enumeration, got {v['n']}")
    bm = en.random_bm(v["n"], scale=v["scale"], seed=v["seed"])
    choice = v["sampler"]
    if choice == "exact":
        samples = exact_sampler(bm, v["samples"], seed=v["seed"])
    elif choice == "gibbs":
        samples = gibbs_sample(bm, v["samples"], n_sweeps=v["gibbs_sweeps"],
                               burn_in=v["burn_in"],
                               temperature=v["temperature"], seed=v["seed"],
                               n_chains=v["chains"])
    else:
        problem, _ = en.bm_to_spin_model(bm)
        _, _, samples = simulated_annealing(
            problem, default_schedule(problem.n_spins), v["samples"], v["seed"])
    report = boltzmann_fidelity(samples, bm, kT=v["kt"])
    tv = empirical_tv_distance(samples, en.exact_enumeration(bm).probabilities)
    write_csv(os.path.join(out, "fidelity.csv"),
              ["n", "sampler", "n_samples", "kt", "slope", "intercept",
               "pearson_r", "n_distinct_states", "tv_distance"],
              [(v["n"], choice, v["samples"], v["kt"], report.slope,
                report.intercept, report.pearson_r, report.n_distinct_states,
                tv)])
    _write_manifest(out, "validate-sampler", v)
    print(f"wrote {out}/fidelity.csv (slope {report.slope:.4f}, "
          f"r {report.pearson_r:.4f}, tv {tv:.4f})")
    return 0


def cmd_stability(args: argparse.Namespace) -> int:
    v = _resolve(STABILITY_OPTS, args)
    out = _ensure_out(v)
    if v["n"] % 2 or v["n"] < 4:
        raise UsageError(f"ladder size must be even and >= 4, got {v['n']}")
    g = en.mobius_ladder(v["n"])
    problem = en.maxcut_to_ising(g)
    cut_target = _ladder_cut_target(g, v)
    # cut c corresponds to coupling energy |E| - 2c for the unit-weight graph
    energy_target = float(len(g.edges) - 2 * cut_target)
    rows = stability_harness(
        problem, energy_target, batch=v["batch"],
        interval_seconds=v["interval"], duration_seconds=v["duration"],
        schedule=_schedule_for(problem.n_spins, v), seed=v["seed"])
    write_csv(os.path.join(out, "stability.csv"),
              ["tick", "t_seconds", "success_fraction", "wall_s"], rows)
    _write_manifest(out, "stability", v)
    mean_success = float(np.mean([r[2] for r in rows]))
    print(f"wrote {out}/stability.csv ({len(rows)} ticks, "
          f"mean success {mean_success:.3f})")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    v = _resolve(SERVE_OPTS, args)
    if v["out"]:
        os.makedirs(v["out"], exist_ok=True)
        _write_manifest(v["out"], "serve", v)
    serve(v["host"], v["port"], max_problem_size=v["max_problem"],
          worker_count=v["workers"],
          announce=lambda msg: print(msg, flush=True))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    v = _resolve(SYNTH_OPTS, args)
    out = _ensure_out(v)
    ds = synthesize(n_cells=v["cells"], n_genes=v["genes"],
                    n_types=v["types"], n_batches=v["batches"],
                    seed=v["seed"], batch_strength=v["batch_strength"],
                    separation=v["separation"])
    save_csv(os.path.join(out, "dataset.csv"), ds)
    _write_manifest(out, "synth", v)
    print(f"wrote {out}/dataset.csv ({ds.n_cells} cells x {ds.n_genes} genes)")
    return 0


# ------------------------------------------------------------------ driver


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qbmvae",
        description="Discrete-latent VAE with a Boltzmann prior: training, "
                    "evaluation, annealing benchmarks, and a sampler service.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    table = [
        ("train", TRAIN_OPTS, cmd_train, "fit a model and write history"),
        ("eval", EVAL_OPTS, cmd_eval, "score an embedding against labels"),
        ("maxcut", MAXCUT_OPTS, cmd_maxcut, "anneal Moebius-ladder max-cut"),
        ("validate-sampler", VALIDATE_OPTS, cmd_validate_sampler,
         "sampler fidelity against exact enumeration"),
        ("stability", STABILITY_OPTS, cmd_stability,
         "repeated batched annealing time series"),
        ("serve", SERVE_OPTS, cmd_serve, "run the TCP sampler service"),
        ("synth", SYNTH_OPTS, cmd_synth, "write a synthetic dataset"),
    ]
    for name, opts, func, help_text in table:
        sp = sub.add_parser(name, help=help_text)
        _add_opts(sp, opts)
        sp.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
