"""Command-line surface.

Every command takes ``--config`` (flat key-value INI), ``--out`` (artifact
directory; nothing is written anywhere else) and ``--seed``.  A manifest.json
with the config hash, seed and library versions accompanies each run, and a
given (config, seed) pair reproduces its metric CSVs byte for byte.

Pipeline order: synth (optional) -> pca-fit -> ema-fit -> train-factor ->
train-stock -> sample / evaluate / optimize / backtest; ablate and data-scale
are self-contained experiment harnesses.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .baselines import classical_factor_fit, garch_fit, garch_nll
from .ciwae import (
    CIWAEConfig,
    build_factor_dataset,
    load_ciwae,
    save_ciwae,
    train_ciwae,
)
from .config import get_typed, load_config, resolve_path, write_manifest
from .data import (
    SplitConfig,
    SynthConfig,
    load_factors,
    load_features,
    load_panel,
    split_by_date,
    synth_generate,
    write_market_csvs,
)
from .exceptions import FactorFlowError
from .factors import (
    EMAGaussianFactorModel,
    EMAParams,
    EMAState,
    PCAModel,
    ema_fit,
    ema_scan,
    global_moments,
    pca_fit,
)
from .nn import load_checkpoint, save_checkpoint, set_seed
from .sampler import MarketModel, mc_statistics, sample_multi_day
from .stockflow import (
    StockDataset,
    StockFlowConfig,
    load_stock_model,
    save_stock_model,
    train_stock_model,
)

FLOAT_FORMAT = "%.12g"


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _ensure_out(out):
    os.makedirs(out, exist_ok=True)
    return out


def _load_inputs(cfg, config_path, with_features=False):
    data = cfg.get("data")
    if data is None:
        _fail("config needs a [data] section")
    panel = load_panel(resolve_path(config_path, data["returns"]),
                       resolve_path(config_path, data["universe"]))
    history = load_factors(resolve_path(config_path, data["factors"]))
    if panel.dates != history.dates:
        shared = sorted(set(panel.dates) & set(history.dates))
        if not shared:
            _fail("panel and factor history share no dates")
        p_idx = [panel.dates.index(d) for d in shared]
        h_idx = [history.dates.index(d) for d in shared]
        panel.returns = panel.returns[p_idx]
        panel.mask = panel.mask[p_idx]
        panel.dates = shared
        history.values = history.values[h_idx]
        history.dates = shared
    if get_typed(data, "return_type", str, "simple") == "log":
        member = panel.mask
        panel.returns[member] = np.log1p(panel.returns[member])
    features = None
    if with_features and data.get("features"):
        features, _ = load_features(
            resolve_path(config_path, data["features"]),
            panel.dates, panel.tickers)
    return panel, history, features


def _splits(cfg):
    section = cfg.get("splits")
    if section is None:
        _fail("config needs a [splits] section")
    return SplitConfig(
        train=(section["train_start"], section["train_end"]),
        val=(section["val_start"], section["val_end"]),
        test=(section["test_start"], section["test_end"]),
    )


def _date_range_indices(dates, start, end):
    arr = np.asarray(dates)
    inside = (arr >= start) & (arr <= end)
    return [i for i in np.nonzero(inside)[0]]


def _artifact(cfg, config_path, key):
    section = cfg.get("artifacts", {})
    if key not in section:
        _fail(f"config [artifacts] section needs {key!r}")
    path = resolve_path(config_path, section[key])
    if not os.path.exists(path):
        _fail(f"artifact {path!r} does not exist")
    return path


def _load_pca(path) -> PCAModel:
    arrays, meta = load_checkpoint(path)
    return PCAModel.from_arrays(arrays)


def _load_ema(path) -> EMAParams:
    arrays, meta = load_checkpoint(path)
    return EMAParams.from_arrays(arrays)


def _build_market(cfg, config_path, with_features=False):
    panel, history, features = _load_inputs(cfg, config_path, with_features)
    pca = _load_pca(_artifact(cfg, config_path, "pca"))
    ema_params = _load_ema(_artifact(cfg, config_path, "ema"))
    factor_path = cfg.get("artifacts", {}).get("factor_model", "")
    if factor_path == "ema_gaussian":
        window = get_typed(cfg.get("factor_model", {}), "window", int, 256)
        factor_model = EMAGaussianFactorModel(pca.n_components, window)
    else:
        factor_model = load_ciwae(_artifact(cfg, config_path, "factor_model"))
    stock_model = load_stock_model(_artifact(cfg, config_path, "stock_model"))
    return MarketModel(
        pca=pca, ema_params=ema_params, factor_model=factor_model,
        stock_model=stock_model, panel_returns=panel.returns,
        panel_mask=panel.mask, factor_values=history.values,
        dates=panel.dates, tickers=panel.tickers, features=features,
    ), panel, history


def _write_csv(path, frame):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


@click.group()
def main():
    """Joint generative modeling of equity return panels."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def synth(config_path, out, seed):
    """Generate a synthetic market (returns/universe/factors CSVs)."""
    cfg = load_config(config_path)
    section = cfg.get("synth", {})
    synth_cfg = SynthConfig(
        n_stocks=get_typed(section, "n_stocks", int, 20),
        n_factors=get_typed(section, "n_factors", int, 5),
        horizon=get_typed(section, "horizon", int, 3000),
        factor_process=get_typed(section, "factor_process", str, "gaussian"),
        factor_vol=get_typed(section, "factor_vol", float, 0.01),
        loading_low=get_typed(section, "loading_low", float, 0.5),
        loading_high=get_typed(section, "loading_high", float, 1.5),
        idio_process=get_typed(section, "idio_process", str, "constant"),
        idio_vol=get_typed(section, "idio_vol", float, 0.01),
        noise=get_typed(section, "noise", str, "normal"),
        nig_alpha=get_typed(section, "nig_alpha", float, 2.0),
        nig_beta=get_typed(section, "nig_beta", float, -0.6),
        seed=seed,
    )
    panel, history, truth = synth_generate(synth_cfg)
    _ensure_out(out)
    write_market_csvs(out, panel, history)
    save_checkpoint(os.path.join(out, "truth.npz"), {
        "betas": truth.betas, "factor_sig2": truth.factor_sig2,
        "idio_sig": truth.idio_sig,
    }, {"config": synth_cfg.__dict__})
    write_manifest(out, "synth", config_path, seed,
                   ["returns.csv", "universe.csv", "factors.csv", "truth.npz"])
    click.echo(f"synthetic market written to {out}")


@main.command("pca-fit")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def pca_fit_cmd(config_path, out, seed):
    """Fit PCA on the training range of the factor history."""
    cfg = load_config(config_path)
    _, history, _ = _load_inputs(cfg, config_path)
    splits = _splits(cfg)
    idx = _date_range_indices(history.dates, *splits.train)
    if not idx:
        _fail("training range matches no factor dates")
    target = get_typed(cfg.get("pca", {}), "explained_variance", float, 0.9)
    model = pca_fit(history.values[idx], target)
    _ensure_out(out)
    save_checkpoint(os.path.join(out, "pca.npz"), model.to_arrays(),
                    {"kind": "pca", "target_explained_variance": target})
    write_manifest(out, "pca-fit", config_path, seed, ["pca.npz"],
                   extra={"n_components": model.n_components})
    click.echo(f"pca: {model.n_components} components "
               f"(target {target}) -> {out}/pca.npz")


@main.command("ema-fit")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def ema_fit_cmd(config_path, out, seed):
    """Fit EMA decay/shrinkage parameters on PCA factors."""
    cfg = load_config(config_path)
    _, history, _ = _load_inputs(cfg, config_path)
    splits = _splits(cfg)
    pca = _load_pca(_artifact(cfg, config_path, "pca"))
    f_pca = pca.transform(history.values)
    train_idx = _date_range_indices(history.dates, *splits.train)
    val_idx = _date_range_indices(history.dates, *splits.val)
    section = cfg.get("ema", {})
    grid = [float(x) for x in get_typed(section, "kl_weights", list,
                                        ["0.0", "0.01", "0.1"])]
    params = ema_fit(f_pca[train_idx], f_pca[val_idx], kl_weight_grid=grid,
                     max_iter=get_typed(section, "max_iter", int, 200))
    _ensure_out(out)
    save_checkpoint(os.path.join(out, "ema.npz"), params.to_arrays(),
                    {"kind": "ema", "kl_weights": grid})
    write_manifest(out, "ema-fit", config_path, seed, ["ema.npz"])
    click.echo(f"ema parameters -> {out}/ema.npz")


def _factor_config(cfg, pca_components, seed):
    section = cfg.get("factor_model", {})
    return CIWAEConfig(
        factor_dim=pca_components,
        window=get_typed(section, "window", int, 256),
        hidden=get_typed(section, "hidden", int, 128),
        latent=get_typed(section, "latent", int, 64),
        dropout=get_typed(section, "dropout", float, 0.5),
        k=get_typed(section, "k", int, 64),
        lr=get_typed(section, "lr", float, 2e-4),
        weight_decay=get_typed(section, "weight_decay", float, 2e-3),
        batch_size=get_typed(section, "batch_size", int, 64),
        epochs=get_typed(section, "epochs", int, 50),
        patience=get_typed(section, "patience", int, 10),
        eval_k=get_typed(section, "eval_k", int, 1024),
        eval_replicates=get_typed(section, "eval_replicates", int, 8),
        use_ema_whitening=get_typed(section, "use_ema_whitening", bool, True),
        seed=seed,
    )


def _factor_datasets(history, pca, ema_params, splits, config):
    f_pca = pca.transform(history.values)
    states = ema_scan(
        f_pca, ema_params,
        init=EMAState(*global_moments(
            f_pca[_date_range_indices(history.dates, *splits.train)])))
    dates = np.asarray(history.dates)

    def dataset_for(rng_pair):
        inside = np.nonzero((dates >= rng_pair[0]) & (dates <= rng_pair[1]))[0]
        return build_factor_dataset(
            f_pca, states, config.window,
            use_whitening=config.use_ema_whitening,
            start=int(inside[0]), stop=int(inside[-1]) + 1,
        )

    return dataset_for(splits.train), dataset_for(splits.val)


@main.command("train-factor")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def train_factor(config_path, out, seed):
    """Train the factor CIWAE; writes checkpoint and training curve."""
    cfg = load_config(config_path)
    _, history, _ = _load_inputs(cfg, config_path)
    splits = _splits(cfg)
    pca = _load_pca(_artifact(cfg, config_path, "pca"))
    ema_params = _load_ema(_artifact(cfg, config_path, "ema"))
    config = _factor_config(cfg, pca.n_components, seed)
    set_seed(seed)
    train_set, val_set = _factor_datasets(history, pca, ema_params, splits,
                                          config)
    model, curve = train_ciwae(train_set, val_set, config, log=click.echo)
    _ensure_out(out)
    save_ciwae(os.path.join(out, "factor_model.npz"), model)
    import pandas as pd

    _write_csv(os.path.join(out, "factor_curve.csv"), pd.DataFrame(
        curve, columns=["epoch", "train_loss", "val_nll"]))
    write_manifest(out, "train-factor", config_path, seed,
                   ["factor_model.npz", "factor_curve.csv"])
    click.echo(f"factor model -> {out}/factor_model.npz")


def _stock_config(cfg, pca_components, seed, feature_dim=0):
    section = cfg.get("stock_model", {})
    return StockFlowConfig(
        factor_dim=pca_components,
        feature_dim=feature_dim,
        window=get_typed(section, "window", int, 256),
        hidden=get_typed(section, "hidden", int, 256),
        block_hidden=get_typed(section, "block_hidden", int, 128),
        cond_dim=get_typed(section, "cond_dim", int, 32),
        n_blocks=get_typed(section, "n_blocks", int, 4),
        spectral_coeff=get_typed(section, "spectral_coeff", float, 0.97),
        dropout=get_typed(section, "dropout", float, 0.5),
        lr=get_typed(section, "lr", float, 1e-3),
        weight_decay=get_typed(section, "weight_decay", float, 2e-2),
        batch_size=get_typed(section, "batch_size", int, 128),
        max_steps=get_typed(section, "max_steps", int, 200_000),
        val_interval=get_typed(section, "val_interval", int, 500),
        patience=get_typed(section, "patience", int, 10),
        architecture=get_typed(section, "architecture", str, "flow"),
        include_stock_history=get_typed(section, "include_stock_history",
                                        bool, True),
        include_factor_history=get_typed(section, "include_factor_history",
                                         bool, True),
        include_next_factors=get_typed(section, "include_next_factors",
                                       bool, True),
        seed=seed,
    )


def _stock_datasets(panel, history, pca, splits, config, features=None,
                    tickers=None):
    f_pca = pca.transform(history.values)
    dates = np.asarray(panel.dates)
    returns, mask = panel.returns, panel.mask
    if tickers is not None:
        cols = [panel.tickers.index(tk) for tk in tickers]
        returns = returns[:, cols]
        mask = mask[:, cols]
        features = None if features is None else features[:, cols]

    def dataset_for(rng_pair):
        inside = np.nonzero((dates >= rng_pair[0]) & (dates <= rng_pair[1]))[0]
        return StockDataset(returns, mask, f_pca, config, features=features,
                            start=int(inside[0]), stop=int(inside[-1]) + 1)

    return dataset_for(splits.train), dataset_for(splits.val)


@main.command("train-stock")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def train_stock(config_path, out, seed):
    """Train the shared stock flow; writes checkpoint and training curve."""
    cfg = load_config(config_path)
    panel, history, features = _load_inputs(cfg, config_path,
                                            with_features=True)
    splits = _splits(cfg)
    pca = _load_pca(_artifact(cfg, config_path, "pca"))
    feature_dim = 0 if features is None else features.shape[2]
    config = _stock_config(cfg, pca.n_components, seed, feature_dim)
    set_seed(seed)
    train_set, val_set = _stock_datasets(panel, history, pca, splits, config,
                                         features)
    model, curve = train_stock_model(train_set, val_set, config,
                                     log=click.echo)
    _ensure_out(out)
    save_stock_model(os.path.join(out, "stock_model.npz"), model)
    import pandas as pd

    _write_csv(os.path.join(out, "stock_curve.csv"), pd.DataFrame(
        curve, columns=["step", "train_loss", "val_nll"]))
    write_manifest(out, "train-stock", config_path, seed,
                   ["stock_model.npz", "stock_curve.csv"])
    click.echo(f"stock model -> {out}/stock_model.npz")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def sample(config_path, out, seed):
    """Joint one-day or multi-day sample paths for a target date."""
    cfg = load_config(config_path)
    market, panel, _ = _build_market(cfg, config_path, with_features=True)
    section = cfg.get("sample", {})
    date = get_typed(section, "date", str)
    horizon = get_typed(section, "horizon", int, 1)
    n_paths = get_typed(section, "n_paths", int, 10_000)
    paths = sample_multi_day(market, date, horizon, n_paths, seed)
    _ensure_out(out)
    save_checkpoint(os.path.join(out, "paths.npz"), paths.to_arrays(),
                    paths.meta())
    _write_csv(os.path.join(out, "paths.csv"), paths.to_frame())
    stats = mc_statistics(paths, correlations=len(paths.tickers) > 1)
    import pandas as pd

    _write_csv(os.path.join(out, "stats.csv"), pd.DataFrame({
        "ticker": stats["tickers"], "vol": stats["vol"],
        **{f"q{int(q * 100):02d}": v for q, v in stats["quantiles"].items()},
    }))
    write_manifest(out, "sample", config_path, seed,
                   ["paths.npz", "paths.csv", "stats.csv"])
    click.echo(f"{n_paths} paths x {horizon} days -> {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def evaluate(config_path, out, seed):
    """NLL, calibration, stylized-fact and excess-correlation metrics."""
    from .evaluation import (
        acf_le_metrics,
        calibration_error,
        excess_correlation,
        marginal_cdf_observed_factors,
        nll_ind_day,
        nll_joint_day,
        standardize_returns,
    )

    cfg = load_config(config_path)
    market, panel, _ = _build_market(cfg, config_path, with_features=True)
    section = cfg.get("evaluate", {})
    start = get_typed(section, "start", str)
    end = get_typed(section, "end", str)
    stride = get_typed(section, "stride", int, 1)
    n_factor_samples = get_typed(section, "n_factor_samples", int, 100_000)
    cal_samples = get_typed(section, "calibration_factor_samples", int, 128)
    do_calibration = get_typed(section, "calibration", bool, True)
    do_stylized = get_typed(section, "stylized", bool, False)
    do_excess = get_typed(section, "excess_correlation", bool, False)

    min_t = max(market.factor_window + 1, market.stock_window)
    eligible = [
        i for i in _date_range_indices(market.dates, start, end)
        if i >= min_t and market.active_tickers(i)
    ]
    day_indices = eligible[::stride]
    if not day_indices:
        _fail(f"no evaluable dates in {start}..{end}")

    rows = []
    cdf_rows = []
    for t in day_indices:
        date = market.dates[t]
        joint, joint_se = nll_joint_day(market, date, n_factor_samples, seed)
        ind, ind_se, _ = nll_ind_day(market, date, n_factor_samples, seed)
        rows.append({"date": date, "metric": "nll_joint", "value": joint,
                     "se": joint_se})
        rows.append({"date": date, "metric": "nll_ind", "value": ind,
                     "se": ind_se})
        if do_calibration:
            for ticker in market.active_tickers(t):
                u = marginal_cdf_observed_factors(
                    market, date, ticker, n_factor_samples=cal_samples,
                    seed=seed)
                cdf_rows.append({"date": date, "ticker": ticker, "cdf": u})
    for metric in ("nll_joint", "nll_ind"):
        values = [r["value"] for r in rows if r["metric"] == metric]
        rows.append({"date": "ALL", "metric": metric,
                     "value": float(np.mean(values)),
                     "se": float(np.std(values) / np.sqrt(len(values)))})
    if cdf_rows:
        import pandas as pd

        frame = pd.DataFrame(cdf_rows)
        per_stock = []
        for ticker, group in frame.groupby("ticker"):
            per_stock.append((len(group),
                              calibration_error(group["cdf"].to_numpy())))
        weights = np.asarray([n for n, _ in per_stock], dtype=float)
        values = np.asarray([v for _, v in per_stock])
        rows.append({"date": "ALL", "metric": "calibration_universe",
                     "value": float(np.average(values, weights=weights)),
                     "se": 0.0})
    if do_stylized or do_excess:
        dates = [market.dates[t] for t in day_indices]
        if do_stylized and len(day_indices) >= 100:
            from .sampler import sample_one_day

            sampled = np.full((len(day_indices), len(market.tickers)), np.nan)
            real = np.full_like(sampled, np.nan)
            common = set(market.tickers)
            for t in day_indices:
                common &= set(market.active_tickers(t))
            common = sorted(common)
            for row, t in enumerate(day_indices):
                paths = sample_one_day(market, market.dates[t], n_paths=1,
                                       seed=seed + t, tickers=common)
                for j, tk in enumerate(common):
                    col = market.tickers.index(tk)
                    sampled[row, j] = paths.returns[0, 0, j]
                    real[row, j] = market.returns[t, col]
            acf, le = acf_le_metrics(real[:, :len(common)],
                                     sampled[:, :len(common)])
            rows.append({"date": "ALL", "metric": "acf", "value": acf,
                         "se": 0.0})
            rows.append({"date": "ALL", "metric": "le", "value": le,
                         "se": 0.0})
        if do_excess:
            panel_std, tickers_std = standardize_returns(
                market, dates,
                n_samples=get_typed(section, "standardize_samples", int, 512),
                seed=seed)
            months = [d[:7] for d in dates]
            try:
                excess = excess_correlation(panel_std, months)
                for month, value in excess:
                    rows.append({"date": month, "metric": "excess_correlation",
                                 "value": value, "se": 0.0})
            except FactorFlowError as exc:
                click.echo(f"excess correlation skipped: {exc}", err=True)

    import pandas as pd

    _ensure_out(out)
    _write_csv(os.path.join(out, "metrics.csv"), pd.DataFrame(rows))
    artifacts = ["metrics.csv"]
    if cdf_rows:
        _write_csv(os.path.join(out, "cdf_values.csv"), pd.DataFrame(cdf_rows))
        artifacts.append("cdf_values.csv")
    write_manifest(out, "evaluate", config_path, seed, artifacts)
    click.echo(f"metrics -> {out}/metrics.csv")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def optimize(config_path, out, seed):
    """Per-day Sharpe-optimal weights from model sample paths."""
    from .portfolio import (
        OptimizerConfig,
        optimize_long_only,
        optimize_with_borrow,
    )
    from .sampler import sample_one_day

    cfg = load_config(config_path)
    market, panel, _ = _build_market(cfg, config_path, with_features=True)
    section = cfg.get("optimize", {})
    start = get_typed(section, "start", str)
    end = get_typed(section, "end", str)
    n_paths = get_typed(section, "n_paths", int, 10_000)
    variant = get_typed(section, "variant", str, "long_short")
    borrow_daily = get_typed(section, "borrow_bps", float, 0.1) * 1e-4
    opt_config = OptimizerConfig(
        lr=get_typed(section, "lr", float, 0.05),
        max_steps=get_typed(section, "max_steps", int, 5000),
        seed=seed,
    )
    min_t = max(market.factor_window + 1, market.stock_window)
    day_indices = [i for i in _date_range_indices(market.dates, start, end)
                   if i >= min_t and len(market.active_tickers(i)) >= 2]
    if not day_indices:
        _fail(f"no optimizable dates in {start}..{end}")
    rows = []
    for t in day_indices:
        date = market.dates[t]
        tickers = market.active_tickers(t)
        paths = sample_one_day(market, date, n_paths, seed, tickers=tickers)
        samples = paths.returns[:, 0, :]
        if variant == "long_only":
            w = optimize_long_only(samples, opt_config)
        elif variant == "borrow":
            w = optimize_with_borrow(samples, np.full(len(tickers),
                                                      borrow_daily),
                                     opt_config)
        else:
            w = optimize_with_borrow(samples, np.zeros(len(tickers)),
                                     opt_config)
        for j, tk in enumerate(tickers):
            rows.append({"date": date, "ticker": tk, "side": "long",
                         "weight": w.long_weights[j]})
            if w.short_weights is not None:
                rows.append({"date": date, "ticker": tk, "side": "short",
                             "weight": w.short_weights[j]})
    import pandas as pd

    _ensure_out(out)
    _write_csv(os.path.join(out, "weights.csv"), pd.DataFrame(rows))
    write_manifest(out, "optimize", config_path, seed, ["weights.csv"],
                   extra={"variant": variant})
    click.echo(f"weights -> {out}/weights.csv")


@main.command("backtest")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def backtest_cmd(config_path, out, seed):
    """Apply dated weights to realized returns; curve, Sharpe, drawdown."""
    import pandas as pd

    from .portfolio import PortfolioWeights, backtest, vol_match_leverage

    cfg = load_config(config_path)
    panel, history, _ = _load_inputs(cfg, config_path)
    section = cfg.get("backtest", {})
    weights_path = resolve_path(config_path, get_typed(section, "weights",
                                                       str))
    if not os.path.exists(weights_path):
        _fail(f"weights file {weights_path!r} does not exist")
    borrow_daily = get_typed(section, "borrow_bps", float, 0.0) * 1e-4
    frame = pd.read_csv(weights_path)
    daily = {}
    for date, group in frame.groupby("date"):
        w_l = np.zeros(len(panel.tickers))
        w_s = np.zeros(len(panel.tickers))
        has_short = False
        for _, row in group.iterrows():
            idx = panel.tickers.index(row["ticker"])
            if row["side"] == "long":
                w_l[idx] = row["weight"]
            else:
                w_s[idx] = row["weight"]
                has_short = True
        w_l = w_l / w_l.sum()
        short = w_s / w_s.sum() if has_short and w_s.sum() > 0 else None
        daily[date] = PortfolioWeights(long_weights=w_l, short_weights=short,
                                       sharpe=0.0, converged=True)
    result = backtest(daily, panel,
                      borrow=borrow_daily if borrow_daily > 0 else None)
    _ensure_out(out)
    _write_csv(os.path.join(out, "backtest.csv"), pd.DataFrame({
        "date": result.dates, "ret": result.returns,
        "cum": result.equity_curve,
    }))
    summary = {
        "sharpe": None if np.isnan(result.sharpe) else result.sharpe,
        "max_drawdown": result.max_drawdown,
        "days": len(result.dates),
        "note": result.note,
    }
    bench = section.get("benchmark_ticker", "")
    if bench:
        col = panel.tickers.index(bench)
        dates_idx = [panel.dates.index(d) for d in result.dates]
        bench_returns = panel.returns[dates_idx, col]
        scale = vol_match_leverage(result.returns, bench_returns)
        summary["vol_match_leverage"] = scale
        summary["levered_sharpe"] = summary["sharpe"]  # Sharpe is scale-free
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "backtest", config_path, seed,
                   ["backtest.csv", "summary.json"])
    click.echo(f"backtest -> {out}/backtest.csv "
               f"(sharpe={summary['sharpe']}, max_dd={result.max_drawdown:.4f})")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def ablate(config_path, out, seed):
    """Ablation grid: factor-model variants, stock features, architectures."""
    from .evaluation import nll_joint_day

    cfg = load_config(config_path)
    panel, history, features = _load_inputs(cfg, config_path,
                                            with_features=True)
    splits = _splits(cfg)
    section = cfg.get("ablate", {})
    pca_targets = [float(x) for x in get_typed(section, "pca_targets", list,
                                               ["0.9"])]
    factor_variants = get_typed(section, "factor_variants", list,
                                ["final", "vae_no_ema", "ema_gaussian"])
    stock_variants = get_typed(section, "stock_variants", list,
                               ["flow", "nig", "normal", "linear",
                                "no_factor_history", "no_stock_history",
                                "no_time_series"])
    eval_stride = get_typed(section, "eval_stride", int, 5)
    n_factor_samples = get_typed(section, "n_factor_samples", int, 512)
    rows = []

    def eval_cell(market, label):
        min_t = max(market.factor_window + 1, market.stock_window)
        idx = [i for i in _date_range_indices(market.dates, *splits.val)
               if i >= min_t and market.active_tickers(i)]
        idx = idx[::eval_stride]
        values = [nll_joint_day(market, market.dates[t], n_factor_samples,
                                seed)[0] for t in idx]
        rows.append({"model": label, "split": "val", "metric": "nll_joint",
                     "value": float(np.mean(values))})
        click.echo(f"{label}: val nll_joint {np.mean(values):.4f}")

    for target in pca_targets:
        train_idx = _date_range_indices(history.dates, *splits.train)
        pca = pca_fit(history.values[train_idx], target)
        f_pca = pca.transform(history.values)
        ema_params = ema_fit(
            f_pca[train_idx],
            f_pca[_date_range_indices(history.dates, *splits.val)],
            kl_weight_grid=(0.0, 0.1), max_iter=60)

        stock_cfg = _stock_config(cfg, pca.n_components, seed,
                                  0 if features is None else features.shape[2])
        train_set, val_set = _stock_datasets(panel, history, pca, splits,
                                             stock_cfg, features)
        base_stock, _ = train_stock_model(train_set, val_set, stock_cfg)

        for variant in factor_variants:
            if variant == "ema_gaussian":
                factor_model = EMAGaussianFactorModel(
                    pca.n_components,
                    get_typed(cfg.get("factor_model", {}), "window", int, 256))
            else:
                fm_cfg = _factor_config(cfg, pca.n_components, seed)
                fm_cfg.use_ema_whitening = variant != "vae_no_ema"
                tr, va = _factor_datasets(history, pca, ema_params, splits,
                                          fm_cfg)
                factor_model, _ = train_ciwae(tr, va, fm_cfg)
            market = MarketModel(
                pca=pca, ema_params=ema_params, factor_model=factor_model,
                stock_model=base_stock, panel_returns=panel.returns,
                panel_mask=panel.mask, factor_values=history.values,
                dates=panel.dates, tickers=panel.tickers, features=features)
            eval_cell(market, f"pca{target}_factor:{variant}")
            if variant == "final":
                final_factor_model = factor_model

        for variant in stock_variants:
            if variant == "flow":
                continue  # the base cell above
            scfg = _stock_config(cfg, pca.n_components, seed,
                                 0 if features is None else features.shape[2])
            if variant in ("nig", "normal", "linear"):
                scfg.architecture = variant
                scfg.__post_init__()
            elif variant == "no_factor_history":
                scfg.include_factor_history = False
            elif variant == "no_stock_history":
                scfg.include_stock_history = False
            elif variant == "no_time_series":
                scfg.include_stock_history = False
                scfg.include_factor_history = False
            tr, va = _stock_datasets(panel, history, pca, splits, scfg,
                                     features)
            stock_model, _ = train_stock_model(tr, va, scfg)
            market = MarketModel(
                pca=pca, ema_params=ema_params,
                factor_model=final_factor_model, stock_model=stock_model,
                panel_returns=panel.returns, panel_mask=panel.mask,
                factor_values=history.values, dates=panel.dates,
                tickers=panel.tickers, features=features)
            eval_cell(market, f"pca{target}_stock:{variant}")

    import pandas as pd

    _ensure_out(out)
    _write_csv(os.path.join(out, "ablate.csv"), pd.DataFrame(rows))
    write_manifest(out, "ablate", config_path, seed, ["ablate.csv"])
    click.echo(f"ablation table -> {out}/ablate.csv")


@main.command("data-scale")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def data_scale(config_path, out, seed):
    """Training-set-size experiment on one target ticker vs a GARCH baseline.

    Trains the stock flow (without next-day factors) on nested subsets that
    always contain the target ticker, 5 seeds each, and reports the target's
    validation NLL per subset size alongside GARCH.
    """
    from .stockflow import _dataset_nll

    cfg = load_config(config_path)
    panel, history, _ = _load_inputs(cfg, config_path)
    splits = _splits(cfg)
    pca = _load_pca(_artifact(cfg, config_path, "pca"))
    section = cfg.get("data_scale", {})
    target = get_typed(section, "target_ticker", str)
    sizes = [int(x) for x in get_typed(section, "subset_sizes", list,
                                       ["1", "5", "20"])]
    n_seeds = get_typed(section, "n_seeds", int, 5)
    garch_noise = get_typed(section, "garch_noise", str, "normal")
    if target not in panel.tickers:
        _fail(f"target ticker {target!r} not in the panel")
    others = [tk for tk in panel.tickers if tk != target]
    rows = []

    # GARCH baseline on the target's own training history
    col = panel.tickers.index(target)
    dates = np.asarray(panel.dates)
    train_rows = np.nonzero((dates >= splits.train[0])
                            & (dates <= splits.train[1]))[0]
    val_rows = np.nonzero((dates >= splits.val[0])
                          & (dates <= splits.val[1]))[0]
    series = panel.returns[:, col]
    garch_params = garch_fit(series[train_rows], "garch", garch_noise,
                             seed=seed)
    garch_val = garch_nll(garch_params, series,
                          start=int(val_rows[0]), stop=int(val_rows[-1]) + 1)
    rows.append({"size": 0, "seed": -1, "model": f"garch_{garch_noise}",
                 "val_nll": garch_val})

    for size in sizes:
        if size > len(panel.tickers):
            _fail(f"subset size {size} exceeds universe {len(panel.tickers)}")
        subset = [target] + others[:size - 1]
        for s in range(n_seeds):
            scfg = _stock_config(cfg, pca.n_components, seed + s)
            scfg.include_next_factors = False
            train_set, val_set = _stock_datasets(panel, history, pca, splits,
                                                 scfg, tickers=subset)
            model, _ = train_stock_model(train_set, val_set, scfg)
            target_val = StockDataset(
                panel.returns[:, [col]], panel.mask[:, [col]],
                pca.transform(history.values), scfg,
                start=int(val_rows[0]), stop=int(val_rows[-1]) + 1)
            nll = _dataset_nll(model, target_val)
            rows.append({"size": size, "seed": seed + s, "model": "flow",
                         "val_nll": nll})
            click.echo(f"size={size} seed={seed + s}: target val NLL {nll:.4f}")

    import pandas as pd

    frame = pd.DataFrame(rows)
    means = frame[frame["model"] == "flow"].groupby("size")["val_nll"].mean()
    per_seed = frame[frame["model"] == "flow"].pivot_table(
        index="seed", columns="size", values="val_nll")
    ordered = per_seed[sorted(sizes)].to_numpy()
    nonincreasing = int((np.diff(ordered, axis=1) <= 1e-9).all(axis=1).sum())
    _ensure_out(out)
    _write_csv(os.path.join(out, "data_scale.csv"), frame)
    report = {
        "sizes": sizes,
        "mean_val_nll": {int(k): float(v) for k, v in means.items()},
        "garch_val_nll": garch_val,
        "seeds_nonincreasing": nonincreasing,
        "n_seeds": n_seeds,
    }
    with open(os.path.join(out, "trend.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "data-scale", config_path, seed,
                   ["data_scale.csv", "trend.json"])
    click.echo(f"data-scale report -> {out}/trend.json "
               f"({nonincreasing}/{n_seeds} seeds non-increasing)")


if __name__ == "__main__":
    main()
