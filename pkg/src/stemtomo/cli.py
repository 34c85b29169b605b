"""Command-line pipeline: phantom, render, noise-fit, noise-apply, train,
reconstruct, eval, slice.

Configuration is JSON plus ``key.path=value`` overrides; unknown keys are
rejected with every offending path listed. ``--dump-config`` prints the
fully merged configuration instead of running. Errors leave a
machine-readable JSON object on stderr and a nonzero exit code.

This module imports only the standard library at the top level: BLAS
thread caps (``--threads`` / ``STEMTOMO_THREADS``) must land in the
environment before numpy is first imported.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")

_COMMANDS = ("phantom", "render", "noise-fit", "noise-apply", "train",
             "reconstruct", "eval", "slice")


# --------------------------------------------------------------------------
# generic config plumbing
# --------------------------------------------------------------------------

def _coerce(current, value, path, errors):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        errors.append(path)
        return current
    if isinstance(current, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        errors.append(path)
        return current
    if isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        errors.append(path)
        return current
    if isinstance(current, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        errors.append(path)
        return current
    if isinstance(current, str):
        if isinstance(value, str):
            return value
        errors.append(path)
        return current
    return value  # None or untyped defaults pass through


def merge_config(defaults, data, path="", errors=None):
    """Overlay a dict onto a dataclass instance, collecting bad paths.

    Every unknown key and every type mismatch is recorded; the combined
    list is raised at the top level so a user sees all problems at once.
    """
    top = errors is None
    errors = [] if errors is None else errors
    updates = {}
    if not isinstance(data, dict):
        errors.append(path or "<config>")
        data = {}
    names = {f.name: f for f in dataclasses.fields(defaults)}
    for key, value in data.items():
        p = f"{path}.{key}" if path else key
        if key not in names:
            errors.append(p)
            continue
        current = getattr(defaults, key)
        if dataclasses.is_dataclass(current) and not isinstance(current, type):
            if value is None:
                updates[key] = None
            else:
                updates[key] = merge_config(current, value, p, errors)
        elif isinstance(value, dict):
            errors.append(p)
        else:
            updates[key] = _coerce(current, value, p, errors)
    merged = dataclasses.replace(defaults, **updates)
    if top and errors:
        from .core import ConfigError
        raise ConfigError("unknown or invalid configuration keys",
                          fields=sorted(errors))
    return merged


def parse_overrides(pairs):
    """``a.b.c=json-or-string`` assignments to a nested dict."""
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            from .core import ConfigError
            raise ConfigError("overrides must look like key=value",
                              fields=[item])
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                from .core import ConfigError
                raise ConfigError("override path collides with a value",
                                  fields=[key])
        node[parts[-1]] = value
    return out


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


# --------------------------------------------------------------------------
# schemas (built lazily; library config classes pull in numpy)
# --------------------------------------------------------------------------

def _schemas():
    from .baselines import ExplicitReconConfig
    from .field import FieldConfig
    from .noiseflow import FitConfig
    from .optics import DefocusConfig, QuadratureConfig
    from .phantom import PhantomConfig
    from .trainer import TrainConfig

    @dataclass
    class AngleRange:
        start: float = -60.0
        stop: float = 60.0
        count: int = 25

    @dataclass
    class SynthNoise:
        bias: float = 0.10
        sigma0: float = 0.03
        sigma1: float = 0.09
        gamma_shape: float = 2.0

    @dataclass
    class PhantomCmd:
        out: str = "phantom.json"
        vol_out: str = ""                  # optional rasterized ground truth
        dims: tuple = (64, 64, 64)
        seed: int = 0
        generator: PhantomConfig = field(default_factory=PhantomConfig)

    @dataclass
    class RenderCmd:
        phantom: str = "phantom.json"
        field_params: str = ""             # render a trained field instead
        out: str = "clean.stk"
        width: int = 96
        height: int = 96
        pixel_spacing: float = 0.0         # 0 picks 2/max(width, height)
        angles: AngleRange = field(default_factory=AngleRange)
        residual_angle_deg: float = 0.0
        defocus_method: str = "dense"      # dense blur or mc jitter
        quadrature: QuadratureConfig = field(
            default_factory=lambda: QuadratureConfig(n_samples=256))
        defocus: DefocusConfig = field(default_factory=DefocusConfig)
        seed: int = 0

    @dataclass
    class NoiseFitCmd:
        clean: str = "clean.stk"
        noisy: str = ""                    # empty: draw synthetic residuals
        out_flow: str = "flow.params"
        report: str = "noise-report.json"
        figure: str = "noise-fit.png"
        holdout_fraction: float = 0.25
        seed: int = 0
        synth: SynthNoise = field(default_factory=SynthNoise)
        fit: FitConfig = field(default_factory=FitConfig)

    @dataclass
    class NoiseApplyCmd:
        clean: str = "clean.stk"
        out: str = "noisy.stk"
        model: str = "flow"                # flow | gaussian | poisson | synthetic
        flow: str = "flow.params"
        gaussian_mu: float = 0.0
        gaussian_sigma: float = 0.05
        poisson_rate: float = 200.0
        poisson_gain: float = 0.0          # 0 picks 1/rate (unbiased)
        poisson_offset: float = 0.0
        synth: SynthNoise = field(default_factory=SynthNoise)
        seed: int = 0

    @dataclass
    class TrainCmd:
        train_stack: str = "noisy.stk"
        val_stack: str = "val.stk"
        out_field: str = "field.params"
        out_flow: str = ""                 # written for mle runs when set
        out_report: str = "report.json"
        figure: str = "training.png"
        flow_init: str = ""                # start mle from a fitted flow
        train: TrainConfig = field(default_factory=TrainConfig)

    @dataclass
    class ReconstructCmd:
        method: str = "implicit"           # implicit | wbp | sirt | explicit
        field_params: str = "field.params"
        stack: str = "noisy.stk"
        out: str = "recon.vol"
        dims: tuple = (64, 64, 64)
        sirt_iterations: int = 100
        wbp_cutoff_frac: float = 1.0
        flow: str = ""                     # explicit mle needs a fitted flow
        explicit: ExplicitReconConfig = field(default_factory=ExplicitReconConfig)

    @dataclass
    class EvalCmd:
        method: str = "ours"
        loss: str = ""
        recon_vol: str = ""
        truth_vol: str = ""
        recon_stack: str = ""
        truth_stack: str = ""
        align: bool = True
        out_json: str = "metrics.json"
        out_csv: str = "metrics.csv"
        csv_append: bool = True
        figure: str = "metrics.png"

    @dataclass
    class SliceCmd:
        vol: str = "recon.vol"
        axis: str = "z"
        index: int = -1                    # -1 picks the middle
        out: str = "slice.pgm"

    return {
        "phantom": PhantomCmd,
        "render": RenderCmd,
        "noise-fit": NoiseFitCmd,
        "noise-apply": NoiseApplyCmd,
        "train": TrainCmd,
        "reconstruct": ReconstructCmd,
        "eval": EvalCmd,
        "slice": SliceCmd,
    }


# --------------------------------------------------------------------------
# command bodies
# --------------------------------------------------------------------------

def _run_phantom(cfg):
    import dataclasses as dc

    from . import phantom as ph
    from .core import write_volume

    gen = dc.replace(cfg.generator, seed=cfg.seed)
    spec = ph.generate_phantom(gen)
    spec.save(cfg.out)
    written = [cfg.out]
    if cfg.vol_out:
        write_volume(ph.rasterize(spec, cfg.dims), cfg.vol_out)
        written.append(cfg.vol_out)
    return {"written": written, "n_components": len(spec.shells)}


def _angles(rng_cfg):
    import numpy as np

    from .core import ValidationError
    if rng_cfg.count < 1:
        raise ValidationError("angles.count must be >= 1", count=rng_cfg.count)
    return np.linspace(rng_cfg.start, rng_cfg.stop, rng_cfg.count)


def _run_render(cfg):
    import numpy as np

    from . import field as field_mod
    from . import optics
    from .core import Geometry, ValidationError, write_stack
    from .phantom import PhantomSpec, density_fn

    if cfg.field_params:
        fn = field_mod.as_density_fn(field_mod.load_params(cfg.field_params))
    else:
        fn = density_fn(PhantomSpec.load(cfg.phantom))
    ps = cfg.pixel_spacing or 2.0 / max(cfg.width, cfg.height)
    ang = _angles(cfg.angles)
    residual = (tuple(np.full(ang.size, cfg.residual_angle_deg))
                if cfg.residual_angle_deg else None)
    geom = Geometry(width=cfg.width, height=cfg.height, pixel_spacing=ps,
                    angles_deg=tuple(ang), residual_angles_deg=residual)
    if cfg.defocus.enabled and cfg.defocus_method == "dense":
        ts = optics.render_stack(fn, geom, cfg.quadrature, None, seed=cfg.seed)
        ts = optics.blur_stack(ts, cfg.defocus.strength_c)
    elif cfg.defocus.enabled and cfg.defocus_method == "mc":
        ts = optics.render_stack(fn, geom, cfg.quadrature, cfg.defocus,
                                 seed=cfg.seed)
    elif cfg.defocus.enabled:
        raise ValidationError("defocus_method must be dense or mc",
                              defocus_method=cfg.defocus_method)
    else:
        ts = optics.render_stack(fn, geom, cfg.quadrature, None, seed=cfg.seed)
    write_stack(ts, cfg.out)
    return {"written": [cfg.out], "n_tilts": ts.n_tilts,
            "mean_transmittance": float(ts.images.mean())}


def _residual_pairs(cfg):
    import numpy as np

    from .core import ValidationError, read_stack, rng_from
    from .noiseflow import synthetic_residuals

    clean = read_stack(cfg.clean)
    e = clean.images.astype(np.float64).reshape(-1)
    if cfg.noisy:
        noisy = read_stack(cfg.noisy)
        if noisy.images.shape != clean.images.shape:
            raise ValidationError("clean and noisy stacks must share geometry",
                                  clean=list(clean.images.shape),
                                  noisy=list(noisy.images.shape))
        r = noisy.images.astype(np.float64).reshape(-1) - e
        source = "pairs"
    else:
        s = cfg.synth
        r = synthetic_residuals(e, rng_from(cfg.seed, "synth"), bias=s.bias,
                                sigma0=s.sigma0, sigma1=s.sigma1,
                                gamma_shape=s.gamma_shape)
        source = "synthetic"
    return e, r, source


def _run_noise_fit(cfg):
    import numpy as np

    from . import metrics, noiseflow
    from .core import ValidationError, rng_from
    from .figures import save_noise_figure

    e, r, source = _residual_pairs(cfg)
    if not 0.0 < cfg.holdout_fraction < 1.0:
        raise ValidationError("holdout_fraction must lie in (0, 1)",
                              holdout_fraction=cfg.holdout_fraction)
    perm = rng_from(cfg.seed, "holdout").permutation(e.size)
    n_hold = max(1000, int(cfg.holdout_fraction * e.size))
    hold, fit_idx = perm[:n_hold], perm[n_hold:]
    if fit_idx.size < 4:
        raise ValidationError("not enough pairs left to fit", n=int(fit_idx.size))
    flow = noiseflow.fit_supervised(e[fit_idx], r[fit_idx], cfg.fit)
    gauss = noiseflow.fit_baseline("gaussian", e[fit_idx], r[fit_idx])
    pois = noiseflow.fit_baseline("poisson", e[fit_idx], r[fit_idx])

    eh, rh = e[hold], r[hold]
    samples = {
        "flow": noiseflow.sample(flow, eh, rng_from(cfg.seed, "jsd", "flow")),
        "gaussian": gauss.sample(eh, rng_from(cfg.seed, "jsd", "gaussian")),
        "poisson": pois.sample(eh, rng_from(cfg.seed, "jsd", "poisson")),
    }
    report = {
        "source": source,
        "n_fit": int(fit_idx.size),
        "n_holdout": int(hold.size),
        "nll": {
            "flow": noiseflow.nll(flow, rh, eh),
            "gaussian": gauss.nll(rh, eh),
            "poisson_normal_approx": pois.nll(rh, eh),
        },
        "jsd": {k: metrics.jsd(rh, v) for k, v in samples.items()},
        "bhattacharyya_distance": {
            k: metrics.bhattacharyya(rh, v)[1] for k, v in samples.items()
        },
        "gaussian_params": gauss.params,
        "poisson_params": pois.params,
    }
    noiseflow.save_flow(flow, cfg.out_flow)
    Path(cfg.report).write_text(
        json.dumps(_sanitize_json(report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    written = [cfg.out_flow, cfg.report]
    if cfg.figure:
        save_noise_figure(eh, rh, flow, cfg.figure,
                          baselines=[("gaussian", gauss), ("poisson", pois)])
        written.append(cfg.figure)
    return {"written": written, "jsd": report["jsd"]}


def _sanitize_json(obj):
    import math
    if isinstance(obj, dict):
        return {k: _sanitize_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize_json(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def _run_noise_apply(cfg):
    import numpy as np

    from .core import ValidationError, read_stack, rng_from, write_stack
    from . import noiseflow

    clean = read_stack(cfg.clean)
    e = clean.images.astype(np.float64).reshape(-1)
    rng = rng_from(cfg.seed, "noise", cfg.model)
    if cfg.model == "flow":
        flow = noiseflow.load_flow(cfg.flow)
        r = noiseflow.sample(flow, e, rng)
    elif cfg.model == "gaussian":
        r = rng.normal(cfg.gaussian_mu, cfg.gaussian_sigma, e.shape)
    elif cfg.model == "poisson":
        gain = cfg.poisson_gain or 1.0 / cfg.poisson_rate
        model = noiseflow.ScalarNoiseBaseline(
            kind="poisson", params={"rate": cfg.poisson_rate, "gain": gain,
                                    "offset": cfg.poisson_offset})
        r = model.sample(e, rng)
    elif cfg.model == "synthetic":
        s = cfg.synth
        r = noiseflow.synthetic_residuals(e, rng, bias=s.bias, sigma0=s.sigma0,
                                          sigma1=s.sigma1,
                                          gamma_shape=s.gamma_shape)
    else:
        raise ValidationError(
            "model must be flow, gaussian, poisson or synthetic",
            model=cfg.model)
    noisy = clean.with_images((e + r).reshape(clean.images.shape))
    write_stack(noisy, cfg.out)
    return {"written": [cfg.out], "model": cfg.model,
            "residual_std": float(np.std(r))}


def _run_train(cfg):
    from . import field as field_mod
    from . import noiseflow, trainer
    from .core import read_stack
    from .figures import save_training_curve

    ts_train = read_stack(cfg.train_stack)
    ts_val = read_stack(cfg.val_stack)
    flow_init = noiseflow.load_flow(cfg.flow_init) if cfg.flow_init else None
    result = trainer.train(ts_train, ts_val, cfg.train, flow_init=flow_init)
    field_mod.save_params(result.field, cfg.out_field)
    written = [cfg.out_field]
    if result.flow is not None and cfg.out_flow:
        noiseflow.save_flow(result.flow, cfg.out_flow)
        written.append(cfg.out_flow)
    # reports must be byte-stable under a fixed seed; wall clock stays out
    result.report.save(cfg.out_report, include_volatile=False)
    written.append(cfg.out_report)
    if cfg.figure:
        save_training_curve(result.report, cfg.figure)
        written.append(cfg.figure)
    return {"written": written,
            "best_iteration": result.report.best_iteration,
            "best_val_loss": result.report.best_val_loss}


def _run_reconstruct(cfg):
    import dataclasses as dc

    from . import baselines, field as field_mod, noiseflow, trainer
    from .core import ValidationError, read_stack, write_volume

    dims = tuple(int(d) for d in cfg.dims)
    if cfg.method == "implicit":
        params = field_mod.load_params(cfg.field_params)
        vol = trainer.reconstruct_volume(params, dims)
    elif cfg.method == "wbp":
        vol = baselines.wbp(read_stack(cfg.stack), dims, cfg.wbp_cutoff_frac)
    elif cfg.method == "sirt":
        vol = baselines.sirt(read_stack(cfg.stack), dims, cfg.sirt_iterations)
    elif cfg.method == "explicit":
        flow = noiseflow.load_flow(cfg.flow) if cfg.flow else None
        ecfg = dc.replace(cfg.explicit, dims=dims)
        vol = baselines.explicit_recon(read_stack(cfg.stack), ecfg, flow)
    else:
        raise ValidationError("method must be implicit, wbp, sirt or explicit",
                              method=cfg.method)
    write_volume(vol, cfg.out)
    return {"written": [cfg.out], "method": cfg.method, "dims": list(dims)}


def _run_eval(cfg):
    from . import metrics
    from .core import ValidationError, read_stack, read_volume
    from .figures import save_eval_figure

    recon_vol = read_volume(cfg.recon_vol) if cfg.recon_vol else None
    truth_vol = read_volume(cfg.truth_vol) if cfg.truth_vol else None
    recon_stack = read_stack(cfg.recon_stack) if cfg.recon_stack else None
    truth_stack = read_stack(cfg.truth_stack) if cfg.truth_stack else None
    if recon_vol is None and recon_stack is None:
        raise ValidationError("eval needs a volume pair or a stack pair")
    report = metrics.evaluate(cfg.method, recon_vol, truth_vol, recon_stack,
                              truth_stack, align=cfg.align, loss_label=cfg.loss)
    report.save_json(cfg.out_json)
    written = [cfg.out_json]
    if cfg.out_csv:
        report.save_csv(cfg.out_csv, append=cfg.csv_append)
        written.append(cfg.out_csv)
    if cfg.figure and recon_vol is not None:
        save_eval_figure(report, recon_vol, truth_vol, cfg.figure)
        written.append(cfg.figure)
    out = {"written": written, "method": cfg.method}
    if report.vol_3d:
        out["mse3d_x100"] = report.vol_3d["mse_x100"]
    if report.mean_2d:
        out["psnr2d_db"] = report.mean_2d["psnr_db"]
    return _sanitize_json(out)


_AXES = {"x": 0, "y": 1, "z": 2}


def write_pgm16(image, path) -> None:
    """16-bit binary PGM (P5, big-endian, maxval 65535); input clipped to [0, 1]."""
    import numpy as np

    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        from .core import ValidationError
        raise ValidationError("slice image must be 2-d", shape=list(img.shape))
    data = np.round(img * 65535.0).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def _run_slice(cfg):
    import numpy as np

    from .core import ValidationError, read_volume

    vol = read_volume(cfg.vol)
    axis = _AXES.get(str(cfg.axis).lower())
    if axis is None:
        raise ValidationError("axis must be x, y or z", axis=cfg.axis)
    n = vol.dims[axis]
    index = n // 2 if cfg.index < 0 else int(cfg.index)
    if not 0 <= index < n:
        raise ValidationError("slice index out of range", index=index, size=n)
    img = np.take(vol.data, index, axis=axis)
    write_pgm16(img, cfg.out)
    return {"written": [cfg.out], "axis": cfg.axis, "index": index}


_RUNNERS = {
    "phantom": _run_phantom,
    "render": _run_render,
    "noise-fit": _run_noise_fit,
    "noise-apply": _run_noise_apply,
    "train": _run_train,
    "reconstruct": _run_reconstruct,
    "eval": _run_eval,
    "slice": _run_slice,
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="JSON configuration file")
    common.add_argument("--dump-config", action="store_true",
                        help="print the merged configuration and exit")
    common.add_argument("--threads", type=int, metavar="N",
                        help="cap BLAS/worker threads (env: STEMTOMO_THREADS)")
    common.add_argument("overrides", nargs="*", metavar="key=value",
                        help="configuration overrides, dotted paths, JSON values")
    parser = argparse.ArgumentParser(
        prog="stemtomo",
        description="Tilt-series simulation and joint field/noise reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "phantom": "generate a random shell phantom (and optional ground-truth volume)",
        "render": "render a clean tilt series from a phantom or trained field",
        "noise-fit": "fit the conditional noise flow plus scalar baselines",
        "noise-apply": "corrupt a clean stack with a noise model",
        "train": "jointly optimise the implicit field (and flow) on a noisy stack",
        "reconstruct": "produce a voxel volume (implicit, wbp, sirt, explicit)",
        "eval": "offset-aligned metrics for volume and/or stack pairs",
        "slice": "export one volume slice as 16-bit PGM",
    }
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _thread_count(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("STEMTOMO_THREADS")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        return -1  # flagged invalid below


def _pin_threads(n):
    os.environ.setdefault("STEMTOMO_THREADS", str(n))
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    try:  # effective even if numpy already loaded (in-process callers)
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except Exception:
        pass


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = _thread_count(args)
    if threads is not None:
        if threads < 1:
            sys.stderr.write(json.dumps(
                {"error": "config", "message": "thread count must be a positive integer",
                 "details": {"fields": ["threads"]}}, sort_keys=True) + "\n")
            return 1
        _pin_threads(threads)

    from .core import FileFormatError, StemtomoError

    try:
        file_cfg = {}
        if args.config:
            try:
                file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise FileFormatError("configuration file is not valid JSON",
                                      path=args.config, reason=str(e))
        data = _deep_merge(file_cfg, parse_overrides(args.overrides))
        cfg = merge_config(_schemas()[args.command](), data)
        if args.dump_config:
            print(json.dumps(_jsonable(cfg), indent=2, sort_keys=True))
            return 0
        summary = _RUNNERS[args.command](cfg)
        print(json.dumps(summary, sort_keys=True, default=str))
        return 0
    except StemtomoError as e:
        sys.stderr.write(json.dumps(e.to_json(), sort_keys=True, default=str) + "\n")
        return 1
    except FileNotFoundError as e:
        sys.stderr.write(json.dumps(
            {"error": "io", "message": str(e), "details": {}},
            sort_keys=True) + "\n")
        return 1
    except Exception as e:  # still machine-readable, but a bug on our side
        sys.stderr.write(json.dumps(
            {"error": "internal", "message": f"{type(e).__name__}: {e}",
             "details": {}}, sort_keys=True, default=str) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
