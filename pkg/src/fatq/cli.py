"""``fatq`` command-line interface.

Every command accepts ``--config FILE`` (flat ``key = value`` lines whose
keys are the command's option names), ``--seed`` and ``--out``. Values
given on the command line override the config file. Outputs are CSV files
in ``--out``, each written to a temporary file and renamed into place.
"""
import re
from pathlib import Path

import click
import numpy as np

from fatq import analysis, error_model, gradcheck, spectral
from fatq.numerics import make_rng, sample_laplace
from fatq.quantizers import SCHEMES, QuantConfig, quantize
from fatq.reporting import (
    ConfigError,
    CsvReport,
    TensorParseError,
    parse_config,
    read_tensor_csv,
    write_tensor_csv,
)
from fatq.trainer import (
    TrainConfig,
    bop,
    finetune,
    load_checkpoint,
    load_npz,
    make_dataset,
    pretrain,
    save_checkpoint,
    train,
    transform_overhead,
)
from fatq.trainer.checkpoint import MAGIC, CheckpointFormatError
from fatq.trainer.cost import conv_macs
from fatq.trainer.layers import MODES, transformed_weight
from fatq.trainer.train import PRETRAIN_LR

SCHEME_CHOICE = click.Choice(SCHEMES)


def _config_path(args):
    for i, arg in enumerate(args):
        if arg == "--config" and i + 1 < len(args):
            return args[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


class ConfigCommand(click.Command):
    """Command that seeds its option defaults from ``--config``."""

    def parse_args(self, ctx, args):
        path = _config_path(args)
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise click.BadParameter(f"cannot read config file: {exc}", param_hint="--config")
            try:
                values = parse_config(text, source=path)
            except ConfigError as exc:
                raise click.BadParameter(str(exc), param_hint="--config")
            known = {p.name for p in self.params} - {"config"}
            for key in values:
                if key not in known:
                    raise click.BadParameter(
                        f"unknown config key {key!r} for '{self.name}'", param_hint="--config"
                    )
            ctx.default_map = {**(ctx.default_map or {}), **values}
        return super().parse_args(ctx, args)


def common(fn):
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=".", show_default=True,
                      help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")(fn)
    fn = click.option("--config", type=click.Path(dir_okay=False), default=None,
                      help="key = value file providing option defaults.")(fn)
    return fn


def _int_list(text, name):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}", param_hint=name)
    if not vals:
        raise click.BadParameter("list is empty", param_hint=name)
    return vals


def _float_list(text, name):
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}", param_hint=name)
    if not vals:
        raise click.BadParameter("list is empty", param_hint=name)
    return vals


def _load_ckpt(path, name):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, CheckpointFormatError) as exc:
        raise click.BadParameter(str(exc), param_hint=name)


def _load_data(data, data_seed):
    if data:
        try:
            return load_npz(data)
        except FileNotFoundError as exc:
            raise click.BadParameter(str(exc), param_hint="--data")
    return make_dataset(seed=data_seed)


def _out_dir(out):
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fail(message):
    raise click.ClickException(message)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Spectral-transform quantization toolkit."""


# -- quantize ---------------------------------------------------------------

_TENSOR_NAME = re.compile(r"^layer(\d+)\.weight$")


def _read_tensor(path, tensor):
    raw = Path(path).read_bytes()
    if raw[:4] == MAGIC:
        m = _TENSOR_NAME.match(tensor)
        if not m:
            raise click.BadParameter(f"expected a name like 'layer0.weight', got {tensor!r}", param_hint="--tensor")
        model = load_checkpoint(path).model
        li = int(m.group(1))
        if li >= len(model.layers):
            raise click.BadParameter(f"checkpoint has no layer {li}", param_hint="--tensor")
        w = model.layers[li].weight
        return w.reshape(w.shape[0], -1)
    try:
        return read_tensor_csv(raw.decode("utf-8"), source=str(path))
    except (TensorParseError, UnicodeDecodeError) as exc:
        raise click.ClickException(f"parse error: {exc}")


@main.command(name="quantize", cls=ConfigCommand)
@common
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="CSV tensor or checkpoint file.")
@click.option("--tensor", default="layer0.weight", show_default=True, help="Tensor name inside a checkpoint.")
@click.option("--bits", type=int, default=4, show_default=True)
@click.option("--scheme", type=SCHEME_CHOICE, default="uniform", show_default=True)
@click.option("--unsigned", is_flag=True, help="Use the unsigned level set.")
@click.option("--alpha", default="optimal", show_default=True,
              help="Clipping threshold, or 'optimal' for the MSE-minimizing one.")
def quantize_cmd(config, seed, out, input_path, tensor, bits, scheme, unsigned, alpha):
    """Quantize a tensor; writes quantized.csv and histogram.csv."""
    x = _read_tensor(input_path, tensor)
    if alpha == "optimal":
        alpha_val, _ = error_model.empirical_optimal_alpha(x, bits, scheme, signed=not unsigned)
    else:
        try:
            alpha_val = float(alpha)
        except ValueError:
            raise click.BadParameter(f"expected a number or 'optimal', got {alpha!r}", param_hint="--alpha")
    try:
        cfg = QuantConfig(bits, scheme, not unsigned, alpha_val)
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    q = quantize(x, cfg)
    mse = float(np.mean((x - q) ** 2))
    hist = CsvReport("histogram", ["level", "count"])
    for level in cfg.scaled_levels:
        hist.add([level, int(np.count_nonzero(q == level))])
    outdir = _out_dir(out)
    write_tensor_csv(outdir / "quantized.csv", q)
    hist.write(outdir / "histogram.csv")
    used = sum(1 for row in hist.rows if row[1] > 0)
    click.echo(f"mse={mse:.9g} alpha={alpha_val:.9g} levels_used={used}/{len(hist.rows)} n={x.size}")


# -- gradcheck --------------------------------------------------------------


@main.command(name="gradcheck", cls=ConfigCommand)
@common
@click.option("--sizes", default="1,2,4,8,9,16,72", show_default=True, help="Filter lengths N to cycle through.")
@click.option("--instances", type=int, default=50, show_default=True, help="Transform Jacobian instances.")
@click.option("--end-to-end", "end_to_end", type=int, default=50, show_default=True,
              help="Small-network backprop instances.")
@click.option("--fixture", type=click.Choice(["none", "asymmetric-mask"]), default="none", show_default=True,
              help="Negative-control fixture.")
def gradcheck_cmd(config, seed, out, sizes, instances, end_to_end, fixture):
    """Compare analytic gradients with central finite differences."""
    sizes = _int_list(sizes, "--sizes")
    if min(sizes) < 1 or instances < 0 or end_to_end < 0:
        raise click.BadParameter("sizes must be >= 1 and counts >= 0")
    results = gradcheck.run_suite(
        make_rng(seed), sizes, instances, end_to_end, None if fixture == "none" else fixture
    )
    report = CsvReport("gradcheck", ["module", "instance", "n", "index", "rel_err", "tol", "passed"])
    for r in results:
        report.add([r.module, r.instance, r.n, ";".join(map(str, r.index)), r.rel_err, r.tol, r.passed])
    report.write(_out_dir(out) / "gradcheck.csv")
    failed = [r for r in results if not r.passed]
    if failed:
        w = gradcheck.worst(failed)
        _fail(
            f"{len(failed)} of {len(results)} checks failed; worst: module={w.module} "
            f"index={w.index} rel_err={w.rel_err:.3g} (tol {w.tol:g})"
        )
    click.echo(f"all {len(results)} checks passed")


# -- error curves -----------------------------------------------------------


@main.command(name="error-curves", cls=ConfigCommand)
@common
@click.option("--b", "b", type=float, default=1.0, show_default=True, help="Laplace scale.")
@click.option("--bits", default="2,3,4", show_default=True)
@click.option("--schemes", default="uniform,log", show_default=True)
@click.option("--a-min", type=float, default=0.5, show_default=True)
@click.option("--a-max", type=float, default=10.0, show_default=True)
@click.option("--a-points", type=int, default=40, show_default=True)
def error_curves_cmd(config, seed, out, b, bits, schemes, a_min, a_max, a_points):
    """Minimal modelled error as a function of the weight amplitude."""
    bits = _int_list(bits, "--bits")
    schemes = [s.strip() for s in schemes.split(",") if s.strip()]
    bad = [s for s in schemes if s not in SCHEMES]
    if bad:
        raise click.BadParameter(f"unknown scheme {bad[0]!r}", param_hint="--schemes")
    if not (0 < a_min < a_max) or a_points < 2 or b <= 0 or min(bits) < 2:
        raise click.BadParameter("need 0 < a_min < a_max, a_points >= 2, b > 0 and bits >= 2")
    grid = np.linspace(a_min, a_max, a_points)
    header = ["scheme", "m", "b", "a", "alpha_star", "quant_noise", "clip_noise", "total",
              "boundary", "grid_alpha_star"]
    report = CsvReport("error_curves", header)
    problems = []
    for scheme in schemes:
        for m in bits:
            rows = error_model.error_vs_amplitude_curve(b, m, scheme, grid)
            prev = -np.inf
            for row in rows:
                g_star = error_model.grid_optimal_alpha(row["a"], b, m, scheme)
                report.add({**row, "scheme": scheme, "m": m, "b": b, "grid_alpha_star": g_star})
                if row["total"] < prev:
                    problems.append(f"{scheme} m={m}: total decreases at a={row['a']:g}")
                if abs(g_star - row["alpha_star"]) > 1e-3:
                    problems.append(f"{scheme} m={m}: grid and solver disagree at a={row['a']:g}")
                prev = row["total"]
    report.write(_out_dir(out) / "error_curves.csv")
    if problems:
        _fail("; ".join(problems[:5]))
    click.echo(f"wrote {len(report.rows)} rows")


# -- mask export ------------------------------------------------------------


@main.command(name="mask-export", cls=ConfigCommand)
@common
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--layer", type=int, default=None, help="Single layer index (default: all).")
def mask_export_cmd(config, seed, out, checkpoint, layer):
    """Per-layer spectral norms and mask values."""
    model = _load_ckpt(checkpoint, "--checkpoint").model
    try:
        tables, summary = analysis.mask_export(model, layer)
    except IndexError as exc:
        raise click.BadParameter(str(exc), param_hint="--layer")
    outdir = _out_dir(out)
    reports = []
    for li, rows in tables.items():
        rep = CsvReport("mask", ["filter", "bin", "freq", "norm", "mask"], [list(r) for r in rows])
        reports.append((outdir / f"mask_layer{li}.csv", rep))
    summ = CsvReport("mask_summary", ["layer", "n", "low_mean", "high_mean"])
    for row in summary:
        summ.add(row)
    reports.append((outdir / "mask_summary.csv", summ))
    for path, rep in reports:
        rep.write(path)
    for row in summary:
        click.echo(f"layer {row['layer']}: low={row['low_mean']:.6f} high={row['high_mean']:.6f}")


# -- shift report -----------------------------------------------------------


@main.command(name="shift-report", cls=ConfigCommand)
@common
@click.option("--fp", "fp_path", type=click.Path(dir_okay=False), required=True, help="Full-precision checkpoint.")
@click.option("--fat", "fat_path", type=click.Path(dir_okay=False), required=True, help="FAT-trained checkpoint.")
@click.option("--identity-mask", is_flag=True, help="Replace the learned mask with ones.")
def shift_report_cmd(config, seed, out, fp_path, fat_path, identity_mask):
    """Share of weights whose quantized value changes under the transform."""
    fp = _load_ckpt(fp_path, "--fp").model
    fat = _load_ckpt(fat_path, "--fat").model
    try:
        rows = analysis.shift_report(fp, fat, identity_mask)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    rep = CsvReport("shift", ["layer", "total", "shifted", "proportion"])
    for row in rows:
        rep.add(row)
    rep.write(_out_dir(out) / "shift.csv")
    for row in rows:
        click.echo(f"layer {row['layer']}: {row['shifted']}/{row['total']} shifted")


# -- band ablation ----------------------------------------------------------


@main.command(name="band-ablation", cls=ConfigCommand)
@common
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--bands", type=int, default=32, show_default=True)
@click.option("--damping", type=float, default=0.5, show_default=True, help="Factor applied to the band's spectrum.")
@click.option("--data", type=click.Path(dir_okay=False), default=None, help=".npz dataset (default: bundled).")
@click.option("--data-seed", type=int, default=0, show_default=True)
def band_ablation_cmd(config, seed, out, checkpoint, bands, damping, data, data_seed):
    """Test accuracy with one frequency band damped at a time."""
    model = _load_ckpt(checkpoint, "--checkpoint").model
    ds = _load_data(data, data_seed)
    try:
        base, rows = analysis.band_ablation(model, ds.x_test, ds.y_test, bands, damping)
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    rep = CsvReport("ablation", ["band", "accuracy", "drop", "natural_index", "mirror_index"])
    for row in rows:
        rep.add(row)
    rep.write(_out_dir(out) / "ablation.csv")
    click.echo(f"baseline accuracy {base:.4f}")


# -- train ------------------------------------------------------------------


@main.command(name="train", cls=ConfigCommand)
@common
@click.option("--mode", type=click.Choice(MODES), default="fp", show_default=True)
@click.option("--init", "init_path", type=click.Path(dir_okay=False), default=None,
              help="Starting checkpoint (required for ste/fat).")
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--lr", type=float, default=None, help=f"Learning rate [default: {PRETRAIN_LR} for fp, 0.01 otherwise].")
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--weight-decay", type=float, default=5e-4, show_default=True)
@click.option("--bits-w", type=int, default=4, show_default=True)
@click.option("--bits-a", type=int, default=4, show_default=True)
@click.option("--scheme", type=SCHEME_CHOICE, default="uniform", show_default=True)
@click.option("--norm-path/--no-norm-path", default=True, show_default=True,
              help="Differentiate the mask's dependence on the weight spectrum.")
@click.option("--weight-norm/--no-weight-norm", default=False, show_default=True)
@click.option("--data", type=click.Path(dir_okay=False), default=None, help=".npz dataset (default: bundled).")
@click.option("--data-seed", type=int, default=0, show_default=True)
def train_cmd(config, seed, out, mode, init_path, epochs, lr, batch_size, weight_decay, bits_w, bits_a,
              scheme, norm_path, weight_norm, data, data_seed):
    """Pre-train (fp) or fine-tune (ste/fat); writes model.ckpt and metrics.csv."""
    if mode != "fp" and init_path is None:
        raise click.BadParameter(f"mode {mode!r} fine-tunes an existing model; pass --init", param_hint="--init")
    if lr is None:
        lr = PRETRAIN_LR if mode == "fp" else TrainConfig.lr
    try:
        cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, weight_decay=weight_decay, seed=seed,
                          mode=mode, bits_w=bits_w, bits_a=bits_a, scheme=scheme, norm_path=norm_path,
                          weight_norm=weight_norm)
        cfg.settings()
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    ds = _load_data(data, data_seed)
    if init_path is None:
        ckpt, log = pretrain(ds, cfg)
    else:
        init = _load_ckpt(init_path, "--init")
        if mode == "fp":
            ckpt, log = train(init.model.copy(), ds, cfg, history=init.history)
        else:
            ckpt, log = finetune(init, ds, cfg)
    metrics = CsvReport("metrics", ["epoch", "split", "loss", "accuracy"], [list(r) for r in log])
    outdir = _out_dir(out)
    metrics.write(outdir / "metrics.csv")
    save_checkpoint(outdir / "model.ckpt", ckpt)
    last = [r for r in log if r[1] == "test"]
    if last:
        click.echo(f"final test accuracy {last[-1][3]:.4f}")


# -- tightening ------------------------------------------------------------


@main.command(name="tightening", cls=ConfigCommand)
@common
@click.option("--b", "b", type=float, default=1.0, show_default=True)
@click.option("--bits", type=int, default=4, show_default=True)
@click.option("--scheme", type=SCHEME_CHOICE, default="uniform", show_default=True)
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--mask-mode", type=click.Choice(["generated", "ones", "half"]), default="generated",
              show_default=True)
@click.option("--c-out", type=int, default=8, show_default=True)
@click.option("--n", "n", type=int, default=72, show_default=True)
def tightening_cmd(config, seed, out, b, bits, scheme, trials, mask_mode, c_out, n):
    """How often the transform shrinks the amplitude and the quantization MSE."""
    if trials < 1 or b <= 0 or c_out < 1 or n < 1:
        raise click.BadParameter("need trials >= 1, b > 0, c_out >= 1 and n >= 1")
    summary, rows = error_model.tightening_harness(make_rng(seed), b, bits, scheme, trials, c_out, n, mask_mode)
    rep = CsvReport("tightening", ["trial", "amp_w", "amp_t", "mse_w", "mse_t", "max_ok", "mse_ok"])
    for row in rows:
        rep.add(row)
    summ = CsvReport("tightening_summary", ["trials", "max_rate", "mse_rate"])
    summ.add(summary)
    outdir = _out_dir(out)
    rep.write(outdir / "tightening.csv")
    summ.write(outdir / "tightening_summary.csv")
    click.echo(f"max|W_t| <= max|W|: {summary['max_rate']:.4f}; mse shrinks: {summary['mse_rate']:.4f}")


# -- mse comparison ---------------------------------------------------------


@main.command(name="mse-compare", cls=ConfigCommand)
@common
@click.option("--betas", default="0.5,0.75,1.0", show_default=True)
@click.option("--bits", type=int, default=4, show_default=True)
@click.option("--scheme", type=SCHEME_CHOICE, default="uniform", show_default=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Use a FAT checkpoint's weights, mask and threshold instead of synthetic weights.")
@click.option("--layer", type=int, default=1, show_default=True)
@click.option("--b", "b", type=float, default=1.0, show_default=True)
@click.option("--c-out", type=int, default=8, show_default=True)
@click.option("--n", "n", type=int, default=72, show_default=True)
def mse_compare_cmd(config, seed, out, betas, bits, scheme, checkpoint, layer, b, c_out, n):
    """Distortion plus quantization error: scaled weights versus the transform."""
    betas = _float_list(betas, "--betas")
    if checkpoint:
        model = _load_ckpt(checkpoint, "--checkpoint").model
        if not 0 <= layer < len(model.layers):
            raise click.BadParameter(f"checkpoint has no layer {layer}", param_hint="--layer")
        s = model.settings
        lay = model.layers[layer]
        if s.mode != "fat":
            raise click.BadParameter("checkpoint was not trained in fat mode", param_hint="--checkpoint")
        _, w, _, mask = transformed_weight(lay, s)
        cfg = lay.weight_cfg(s)
    else:
        if b <= 0 or c_out < 1 or n < 1:
            raise click.BadParameter("need b > 0, c_out >= 1 and n >= 1")
        rng = make_rng(seed)
        w = sample_laplace(rng, b, c_out * n).reshape(c_out, n)
        spec = spectral.spectrum(w)
        mask = spectral.make_mask(spec, error_model.random_generator(rng, spec.norms))
        alpha, _ = error_model.empirical_optimal_alpha(w, bits, scheme)
        cfg = QuantConfig(bits, scheme, True, alpha)
    try:
        rows = error_model.mse_transform_comparison(w, mask, betas, cfg)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--betas")
    rep = CsvReport("mse_compare", ["transform", "beta", "distortion", "quant_error", "total"])
    for row in rows:
        rep.add(row)
    rep.write(_out_dir(out) / "mse_compare.csv")
    best = min(rows, key=lambda r: r["total"])
    click.echo(f"lowest total: {best['transform']} ({best['total']:.6g})")


# -- bop --------------------------------------------------------------------


@main.command(name="bop", cls=ConfigCommand)
@common
@click.option("--c-out", type=int, default=256, show_default=True)
@click.option("--c-in", type=int, default=3, show_default=True)
@click.option("--k", "k", type=int, default=3, show_default=True)
@click.option("--h", "h", type=int, default=224, show_default=True)
@click.option("--w", "w", type=int, default=224, show_default=True)
@click.option("--bits-w", type=int, default=4, show_default=True)
@click.option("--bits-a", type=int, default=4, show_default=True)
def bop_cmd(config, seed, out, c_out, c_in, k, h, w, bits_w, bits_a):
    """Bit operations of a convolution and the relative cost of the transform."""
    try:
        macs = conv_macs(c_out, c_in, k, h, w)
        ops = bop(bits_w, bits_a, macs)
        delta, _, ratio = transform_overhead(c_out, c_in, k, h, w)
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    rep = CsvReport("bop", ["c_out", "c_in", "k", "h", "w", "m_w", "m_a", "macs", "bop", "transform_macs",
                            "overhead_ratio"])
    rep.add([c_out, c_in, k, h, w, bits_w, bits_a, macs, ops, delta, ratio])
    rep.write(_out_dir(out) / "bop.csv")
    click.echo(f"bop={ops} transform overhead ratio={ratio:.6f}")


if __name__ == "__main__":
    main()
