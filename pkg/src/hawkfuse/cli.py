"""Command-line pipeline: simulate, cluster, fit, evaluate, report.

Heavy imports happen inside the commands so ``--threads`` can cap native
thread pools before numpy loads.  Every run writes one manifest recording
the exact inputs, outputs, seed, and timing; identical inputs and seed
reproduce identical outputs.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import time
from pathlib import Path

import click


def _friendly_errors(fn):
    """Surface domain errors as clean CLI messages with a nonzero exit."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, RuntimeError) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper

_FIT_KEYS = {
    "max_iters": int,
    "tol": float,
    "epsilon_lambda_scale": float,
    "bandwidth_k": int,
    "bandwidth_floor": float,
    "bandwidth_strategy": str,
    "freeze_bandwidths": lambda s: s.lower() in ("1", "true", "yes"),
    "time_cutoff": float,
    "space_cutoff": float,
    "sigma_floor_frac": float,
    "init_k0": float,
    "prior_omega": float,
    "prior_sigma": float,
    "seed": int,
}

_SIM_SCALARS = {
    "t_horizon": float,
    "unlabeled_fraction": float,
    "seed": int,
    "groups": int,
}


def _read_config(path) -> dict[str, str]:
    cfg = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise click.UsageError(f"{path}:{line_no}: expected 'key = value'")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def _parse_typed(cfg: dict, key: str, caster, errors_as: str | None = None):
    try:
        return caster(cfg[key])
    except ValueError as exc:
        raise click.UsageError(f"bad value for config field {errors_as or key!r}: {exc}")


def _fit_config(config_path, seed=None):
    from .model import FitConfig

    kwargs = {}
    if config_path:
        cfg = _read_config(config_path)
        for key in cfg:
            if key not in _FIT_KEYS:
                raise click.UsageError(f"unknown fit config field {key!r}")
        for key, caster in _FIT_KEYS.items():
            if key in cfg:
                kwargs[key] = _parse_typed(cfg, key, caster)
    if seed is not None:
        kwargs["seed"] = seed
    try:
        return FitConfig(**kwargs)
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _sim_config(config_path, seed=None):
    from .kernels import TriggerParams
    from .sim import GroupSimSpec, SimConfig

    cfg = _read_config(config_path)
    n_groups = _parse_typed(cfg, "groups", int) if "groups" in cfg else None
    if n_groups is None:
        raise click.UsageError("sim config must set the 'groups' field")
    groups = []
    group_keys = {"bg", "mu", "k0", "omega", "sigma"}
    for key in cfg:
        if key in _SIM_SCALARS:
            continue
        if "." in key:
            head, tail = key.split(".", 1)
            if head.startswith("group") and head[5:].isdigit() and tail in group_keys:
                continue
        raise click.UsageError(f"unknown sim config field {key!r}")
    for idx in range(1, n_groups + 1):
        prefix = f"group{idx}."
        try:
            bg = tuple(float(v) for v in cfg[prefix + "bg"].replace(",", " ").split())
            mu = float(cfg[prefix + "mu"])
            trig = TriggerParams(
                float(cfg[prefix + "k0"]),
                float(cfg[prefix + "omega"]),
                float(cfg[prefix + "sigma"]),
            )
        except KeyError as exc:
            raise click.UsageError(f"sim config missing field {exc.args[0]!r}")
        except ValueError as exc:
            raise click.UsageError(f"bad group {idx} value: {exc}")
        try:
            groups.append(GroupSimSpec(bg=bg, mu=mu, trigger=trig, label=idx - 1))
        except ValueError as exc:
            raise click.UsageError(f"group {idx}: {exc}")
    try:
        return SimConfig(
            groups=tuple(groups),
            t_horizon=_parse_typed(cfg, "t_horizon", float) if "t_horizon" in cfg else 1000.0,
            unlabeled_fraction=_parse_typed(cfg, "unlabeled_fraction", float)
            if "unlabeled_fraction" in cfg
            else 0.3,
            seed=seed if seed is not None else (_parse_typed(cfg, "seed", int) if "seed" in cfg else 0),
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command, params, inputs, outputs, seed, started, warnings=()):
    manifest = {
        "command": command,
        "config": params,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "elapsed_s": round(time.time() - started, 3),
        "warnings": list(warnings),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_days(spec: str | None, window, day_length: float):
    if spec is None:
        import math

        last = int(math.floor(window.duration / day_length))
        return list(range(0, max(last, 1)))
    lo, _, hi = spec.partition(":")
    try:
        return list(range(int(lo), int(hi)))
    except ValueError:
        raise click.UsageError(f"bad --days range {spec!r}, expected 'lo:hi'")


@click.group()
@click.option("--threads", type=int, default=None, help="Cap native thread pools.")
def main(threads):
    """Marked space-time self-exciting point process toolkit."""
    if threads is not None:
        if threads < 1:
            raise click.UsageError("threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--replicates", type=int, default=1)
@click.option("--out", "out_path", required=True, type=click.Path())
@_friendly_errors
def simulate(config_path, seed, replicates, out_path):
    """Simulate seeded synthetic datasets (events CSV + truth sidecar)."""
    started = time.time()
    if replicates < 1:
        raise click.UsageError("replicates must be >= 1")
    import numpy as np

    from .data import write_events
    from .sim import simulate_dataset, write_truth

    cfg = _sim_config(config_path, seed=seed)
    out = _out_dir(out_path)
    outputs = []
    for rep in range(replicates):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(rep,)))
        result = simulate_dataset(cfg, rng=rng)
        ev_path = out / f"events_r{rep:03d}.csv"
        tr_path = out / f"truth_r{rep:03d}.csv"
        write_events(result.dataset, ev_path)
        write_truth(result, tr_path)
        outputs.extend([ev_path, tr_path])
        click.echo(f"replicate {rep}: {len(result.dataset)} events -> {ev_path}")
    _write_manifest(
        out, "simulate", {"config": str(config_path), "replicates": replicates},
        [config_path], outputs, cfg.seed, started,
    )


@main.command()
@click.argument("tox_csv", type=click.Path(exists=True))
@click.option("--k", type=int, default=None, help="Fix K and skip selection.")
@click.option("--k-range", default="2:8", help="Range lo:hi (inclusive) to scan.")
@click.option("--seed", type=int, default=0)
@click.option("--iters", type=int, default=500)
@click.option("--restarts", type=int, default=5)
@click.option("--top-m", type=int, default=5)
@click.option("--out", "out_path", required=True, type=click.Path())
@_friendly_errors
def cluster(tox_csv, k, k_range, seed, iters, restarts, top_m, out_path):
    """Cluster toxicology reports into K substance groups."""
    started = time.time()
    from .data import load_tox
    from .nmf import assign_clusters, coherence, factorize, select_k, top_terms

    tox = load_tox(tox_csv)
    out = _out_dir(out_path)
    score_rows = []
    if k is None:
        lo, _, hi = k_range.partition(":")
        try:
            k_values = range(int(lo), int(hi) + 1)
        except ValueError:
            raise click.UsageError(f"bad --k-range {k_range!r}, expected 'lo:hi'")
        sel = select_k(tox, k_values, seed=seed, iters=iters, restarts=restarts, top_m=top_m)
        k = sel.best_k
        score_rows = sorted(sel.scores.items())
        click.echo(f"selected K = {k} by coherence")
    factors = factorize(tox, k, seed=seed, iters=iters, restarts=restarts)
    labels = assign_clusters(factors)
    coh = coherence(factors, tox, top_m=min(top_m, tox.n_substances))
    if not score_rows:
        score_rows = [(k, coh.mean)]

    labels_path = out / "labels.csv"
    with open(labels_path, "w") as fh:
        fh.write("id,group\n")
        for rid, lab in zip(tox.report_ids, labels):
            fh.write(f"{rid},{int(lab)}\n")
    topics_path = out / "topics.json"
    topics_path.write_text(
        json.dumps(
            {
                "K": k,
                "coherence": coh.per_topic,
                "topics": [{"top_terms": terms} for terms in top_terms(factors, min(top_m, tox.n_substances))],
            },
            indent=2,
        )
    )
    table_path = out / "coherence.csv"
    with open(table_path, "w") as fh:
        fh.write("k,mean_coherence\n")
        for kk, score in score_rows:
            fh.write(f"{kk},{score!r}\n")
    _write_manifest(
        out, "cluster", {"k": k, "k_range": k_range, "iters": iters, "restarts": restarts, "top_m": top_m},
        [tox_csv], [labels_path, topics_path, table_path], seed, started,
    )


def _window_from_flags(t0, t1, x0, x1, y0, y1):
    vals = (t0, t1, x0, x1, y0, y1)
    if all(v is None for v in vals):
        return None
    if any(v is None for v in vals):
        raise click.UsageError("either give all of --t0/--t1/--x0/--x1/--y0/--y1 or none")
    from .data import Window

    return Window(*vals)


_WINDOW_OPTIONS = [
    click.option("--t0", type=float, default=None),
    click.option("--t1", type=float, default=None),
    click.option("--x0", type=float, default=None),
    click.option("--x1", type=float, default=None),
    click.option("--y0", type=float, default=None),
    click.option("--y1", type=float, default=None),
]


def _with_window_options(fn):
    for opt in reversed(_WINDOW_OPTIONS):
        fn = opt(fn)
    return fn


@main.command("fit")
@click.argument("events_csv", type=click.Path(exists=True))
@click.option("--k", "n_groups", type=int, required=True)
@click.option("--labels", "labels_csv", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@_with_window_options
@click.option("--out", "out_path", required=True, type=click.Path())
@_friendly_errors
def fit_command(events_csv, n_groups, labels_csv, config_path, seed, t0, t1, x0, x1, y0, y1, out_path):
    """Fit the model; K>1 or labeled data runs the fused multi-group EM."""
    started = time.time()
    from .data import load_events, save_model
    from .em import fit as fit_single
    from .fuse import fit_fused

    config = _fit_config(config_path, seed=seed)
    window = _window_from_flags(t0, t1, x0, x1, y0, y1)
    labels = None
    if labels_csv:
        labels = {}
        with open(labels_csv) as fh:
            header = fh.readline()
            if not header.startswith("id,group"):
                raise click.UsageError("labels CSV must have header 'id,group'")
            for line in fh:
                if line.strip():
                    rid, grp = line.strip().split(",")[:2]
                    labels[int(rid)] = int(grp)
    dataset = load_events(events_csv, window, n_groups, labels=labels)
    if n_groups == 1 and dataset.n_unlabeled == len(dataset):
        model = fit_single(dataset, config)
    else:
        model = fit_fused(dataset, n_groups, config)
    out = _out_dir(out_path)
    model_path = out / "model.json"
    save_model(model, model_path)
    outputs = [model_path]
    if model.assignments is not None:
        assign_path = out / "assignments.csv"
        with open(assign_path, "w") as fh:
            fh.write("id,group,prob\n")
            for a in model.assignments:
                fh.write(f"{a.event_id},{a.group},{a.prob!r}\n")
        outputs.append(assign_path)
    trace = model.trace
    click.echo(
        f"fit: {trace.iterations} iterations, converged={trace.converged}, "
        f"K0={[round(g.trigger.k0, 4) for g in model.groups]}"
    )
    _write_manifest(
        out,
        "fit",
        {
            "k": n_groups,
            "config": str(config_path) if config_path else None,
            "iterations": trace.iterations,
            "converged": trace.converged,
        },
        [p for p in (events_csv, labels_csv, config_path) if p],
        outputs,
        config.seed,
        started,
        warnings=[f"lambda clamps: {trace.lambda_clamps}"] if trace.lambda_clamps else [],
    )


@main.command()
@click.argument("model_json", type=click.Path(exists=True))
@click.argument("events_csv", type=click.Path(exists=True))
@click.option("--subset", type=click.Choice(["A", "B", "all"]), default="all")
@click.option("--grid", type=int, default=None, help="Also rank a GxG daily grid and report AUC.")
@click.option("--days", default=None, help="Day range lo:hi for the grid forecast.")
@click.option("--day-length", type=float, default=1.0)
@click.option("--with-baselines", is_flag=True, default=False)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@_friendly_errors
def evaluate(model_json, events_csv, subset, grid, days, day_length, with_baselines, config_path, seed, out_path):
    """Score a fitted model (log-likelihood, AIC, optional grid AUC)."""
    started = time.time()
    from .data import load_events, load_model
    from .evaluate import (
        ScoreRow,
        aic,
        auc,
        compare_models,
        fit_baselines,
        forecast_series,
        observed_loglik,
        write_forecast_csv,
        write_report_csv,
    )
    from .evaluate import GridForecast

    config = _fit_config(config_path, seed=seed)
    model = load_model(model_json)
    dataset = load_events(events_csv, None, model.n_groups)
    out = _out_dir(out_path)
    day_list = _parse_days(days, model.window, day_length) if grid else None

    if with_baselines:
        baseline_a, baseline_b = fit_baselines(dataset, model.n_groups, config)
        rows = compare_models(
            dataset,
            model,
            baseline_a,
            baseline_b,
            window=model.window,
            config=config,
            with_auc=grid is not None,
            grid=grid or 50,
            days=day_list,
            day_length=day_length,
        )
    else:
        ll = observed_loglik(dataset, model, model.window, subset=subset, config=config)
        df = 4 * model.n_groups
        auc_val = None
        if grid:
            scores, labels = forecast_series(
                model, dataset, day_list, grid=grid, subset=subset, day_length=day_length
            )
            auc_val = auc(scores.ravel(), labels.ravel())
        rows = [ScoreRow(model="model", subset=subset, loglik=ll, df=df, aic=aic(ll, df), auc=auc_val)]

    report_path = out / "report.csv"
    write_report_csv(rows, report_path)
    outputs = [report_path]
    if grid:
        scores, labels = forecast_series(
            model, dataset, day_list, grid=grid, subset=subset, day_length=day_length
        )
        forecasts = [
            GridForecast(day=d, scores=s.reshape(grid, grid), labels=l.reshape(grid, grid))
            for d, s, l in zip(day_list, scores, labels)
        ]
        fc_path = out / "forecast.csv"
        write_forecast_csv(forecasts, fc_path)
        outputs.append(fc_path)
    for row in rows:
        click.echo(
            f"{row.model} on {row.subset}: loglik={row.loglik:.4f} aic={row.aic:.4f}"
            + (f" auc={row.auc:.4f}" if row.auc is not None else "")
        )
    _write_manifest(
        out,
        "evaluate",
        {"subset": subset, "grid": grid, "with_baselines": with_baselines},
        [model_json, events_csv] + ([config_path] if config_path else []),
        outputs,
        config.seed,
        started,
    )


@main.command()
@click.argument("model_json", type=click.Path(exists=True))
@click.argument("events_csv", type=click.Path(exists=True))
@click.option("--grid", type=int, default=50, help="Background heatmap resolution.")
@click.option("--bins", type=int, default=50, help="Temporal histogram bins.")
@click.option("--out", "out_path", required=True, type=click.Path())
@_friendly_errors
def report(model_json, events_csv, grid, bins, out_path):
    """Emit plot-ready CSV bundles for heatmaps and histograms."""
    started = time.time()
    import numpy as np

    from .data import load_events, load_model
    from .evaluate import resolve_groups
    from .kernels import kde_space

    model = load_model(model_json)
    dataset = load_events(events_csv, None, model.n_groups)
    out = _out_dir(out_path)
    window = model.window

    # per-group spatial background on a grid x grid lattice
    xs = window.x0 + (window.x1 - window.x0) * (np.arange(grid) + 0.5) / grid
    ys = window.y0 + (window.y1 - window.y0) * (np.arange(grid) + 0.5) / grid
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    heat_path = out / "heatmap.csv"
    with open(heat_path, "w") as fh:
        fh.write("group,ix,iy,x,y,value\n")
        for k, gp in enumerate(model.groups):
            if gp.background.nb > 0:
                vals = kde_space(gx.ravel(), gy.ravel(), gp.background)
            else:
                vals = np.zeros(grid * grid)
            for idx, v in enumerate(vals):
                ix, iy = divmod(idx, grid)
                fh.write(f"{k},{ix},{iy},{gx.ravel()[idx]!r},{gy.ravel()[idx]!r},{v!r}\n")

    # temporal histograms per group, split by source
    groups = resolve_groups(dataset, model)
    edges = np.linspace(window.t0, window.t1, bins + 1)
    hist_path = out / "hist_time.csv"
    with open(hist_path, "w") as fh:
        fh.write("group,source,bin_lo,bin_hi,count\n")
        for k in range(model.n_groups):
            for source, mask in (("A", ~dataset.is_b), ("B", dataset.is_b)):
                sel = mask & (groups == k)
                counts, _ = np.histogram(dataset.t[sel], bins=edges)
                for b in range(bins):
                    fh.write(f"{k},{source},{edges[b]!r},{edges[b + 1]!r},{int(counts[b])}\n")

    # inter-event times with a fitted exponential overlay
    diffs = np.diff(dataset.t)
    diffs = diffs[diffs > 0]
    ie_path = out / "interevent.csv"
    fit_path = out / "interevent_fit.csv"
    if diffs.size:
        mean_gap = float(diffs.mean())
        rate = 1.0 / mean_gap
        ie_edges = np.linspace(0.0, float(diffs.max()), bins + 1)
        counts, _ = np.histogram(diffs, bins=ie_edges)
        widths = np.diff(ie_edges)
        with open(ie_path, "w") as fh:
            fh.write("bin_lo,bin_hi,count,density\n")
            for b in range(bins):
                dens = counts[b] / (diffs.size * widths[b]) if widths[b] > 0 else 0.0
                fh.write(f"{ie_edges[b]!r},{ie_edges[b + 1]!r},{int(counts[b])},{dens!r}\n")
        with open(fit_path, "w") as fh:
            fh.write("rate,mean,n\n")
            fh.write(f"{rate!r},{mean_gap!r},{diffs.size}\n")
    else:
        ie_path.write_text("bin_lo,bin_hi,count,density\n")
        fit_path.write_text("rate,mean,n\n")
    _write_manifest(
        out,
        "report",
        {"grid": grid, "bins": bins},
        [model_json, events_csv],
        [heat_path, hist_path, ie_path, fit_path],
        None,
        started,
    )


if __name__ == "__main__":
    main()
