"""Command-line pipelines: simulate, train, evaluate, diagnose, export.

Numeric modules are imported lazily so the thread cap from ``--threads``
lands before numpy initializes its BLAS pools (default 1 thread for
reproducible runs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys

EXIT_CONFIG = 2
EXIT_TRAINING = 3

SECTIONS = ("scenario", "train", "fdm", "eval", "spectra", "synth", "output")

SCENARIO_KEYS = {"f", "bow_force", "bow_velocity", "friction_a"}
TRAIN_KEYS = {
    "optimizer", "lr0", "decay_rate", "decay_steps", "annealing",
    "anneal_alpha", "anneal_every", "time_windows", "causal_chunks",
    "causal_threshold", "n_ode", "n_ob", "groups", "t_per_group",
    "batch_size", "max_steps", "seed", "width", "depth", "c_rff", "c_out",
    "sigma_rff", "scale_t", "scale_pq", "log_every", "convergence_horizon",
    "convergence_rtol", "obs_t_max", "obs_rate",
}
FDM_KEYS = {"sample_rate", "duration", "p0", "q0", "residuals"}
EVAL_KEYS = {"checkpoint", "n_cases", "t_max", "n_points", "seed",
             "reference_rate", "nmse_normalization", "ncc_centered"}
SPECTRA_KEYS = {"checkpoint", "top_k", "probes", "depth", "grid_n",
                "n_colloc", "seed"}
SYNTH_KEYS = {"trajectory", "sample_rate", "duration", "p0", "q0"}
OUTPUT_KEYS = {"dir"}


class ConfigFileError(ValueError):
    pass


def _load_toml(path: str) -> dict:
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _key_line(path: str, key: str) -> str:
    """Best-effort line locator for config error messages."""
    try:
        with open(path) as fh:
            for i, line in enumerate(fh, start=1):
                if re.match(rf"\s*{re.escape(key)}\s*=", line) or \
                        re.match(rf"\s*\[{re.escape(key)}\]", line):
                    return f"{path}:{i}"
    except OSError:
        pass
    return path


def validate_config(raw: dict, path: str) -> None:
    """Unknown sections or keys are hard errors (silent typos would
    invalidate a reproduction)."""
    allowed = {"scenario": SCENARIO_KEYS, "train": TRAIN_KEYS, "fdm": FDM_KEYS,
               "eval": EVAL_KEYS, "spectra": SPECTRA_KEYS, "synth": SYNTH_KEYS,
               "output": OUTPUT_KEYS}
    for section, content in raw.items():
        if section not in SECTIONS:
            raise ConfigFileError(f"{_key_line(path, section)}: unknown section [{section}]")
        if not isinstance(content, dict):
            raise ConfigFileError(f"{_key_line(path, section)}: [{section}] must be a table")
        for key in content:
            if key not in allowed[section]:
                raise ConfigFileError(
                    f"{_key_line(path, key)}: unknown key {key!r} in [{section}]")


def _scenario(raw: dict):
    from .fdm import OscillatorConfig
    from .friction import FrictionParams

    s = raw.get("scenario", {})
    return OscillatorConfig(
        f=float(s.get("f", 100.0)),
        F_B=float(s.get("bow_force", 10.0)),
        v_B=float(s.get("bow_velocity", 0.2)),
        friction=FrictionParams(float(s.get("friction_a", 100.0))))


def _train_plan(raw: dict, seed_override):
    from .train import TrainPlan

    t = raw.get("train", {})
    seed = int(seed_override if seed_override is not None else t.get("seed", 0))
    return TrainPlan(
        optimizer=str(t.get("optimizer", "adam")),
        lr0=float(t.get("lr0", 0.003)),
        decay_rate=float(t.get("decay_rate", 0.9)),
        decay_steps=int(t.get("decay_steps", 10000)),
        annealing=bool(t.get("annealing", False)),
        anneal_alpha=float(t.get("anneal_alpha", 0.1)),
        anneal_every=int(t.get("anneal_every", 100)),
        m_tm=int(t.get("time_windows", 1)),
        m_cau=int(t.get("causal_chunks", 1)),
        eta_cau=float(t.get("causal_threshold", 0.1)),
        n_ode=int(t.get("n_ode", 1000)),
        n_ob=int(t.get("n_ob", 0)),
        groups=int(t.get("groups", 100)),
        t_per_group=int(t.get("t_per_group", 100)),
        batch_size=int(t.get("batch_size", 0)),
        max_steps=int(t.get("max_steps", 10000)),
        seed=seed,
        log_every=int(t.get("log_every", 100)),
        convergence_horizon=int(t.get("convergence_horizon", 2000)),
        convergence_rtol=float(t.get("convergence_rtol", 1e-4)),
    )


def _net_args(raw: dict) -> dict:
    t = raw.get("train", {})
    return {"width": int(t.get("width", 100)), "depth": int(t.get("depth", 4)),
            "c_rff": int(t.get("c_rff", 50)),
            "sigma_prime": float(t.get("sigma_rff", 1.0))}


def _scales(raw: dict) -> tuple[float, float]:
    t = raw.get("train", {})
    return float(t.get("scale_t", 0.1)), float(t.get("scale_pq", 0.2))


# ---------------------------------------------------------------------------
# artifacts


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, mode: str, seed, files: list[str]) -> str:
    entries = []
    for name in sorted(files):
        p = os.path.join(out_dir, name)
        entries.append({"file": name, "sha256": _sha256(p),
                        "bytes": os.path.getsize(p)})
    manifest = {"mode": mode, "seed": seed, "files": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def write_wav(path: str, signal, sample_rate: int = 44_100) -> None:
    """Mono 16-bit PCM, peak-normalized to -1 dBFS (silence stays silent)."""
    import wave

    import numpy as np

    sig = np.asarray(signal, dtype=np.float64)
    peak = float(np.max(np.abs(sig))) if sig.size else 0.0
    if peak > 0.0:
        sig = sig * (10.0 ** (-1.0 / 20.0) / peak)
    pcm = np.clip(np.round(sig * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def decimate_to_audio(p, source_rate: float, target_rate: float = 44_100.0):
    """Block-average decimation by the integer rate ratio."""
    import numpy as np

    ratio = source_rate / target_rate
    k = int(round(ratio))
    if abs(ratio - k) > 1e-9 or k < 1:
        raise ValueError(f"rate ratio {ratio} is not an integer")
    if k == 1:
        return np.asarray(p, dtype=np.float64)
    n = (len(p) // k) * k
    return np.asarray(p[:n], dtype=np.float64).reshape(-1, k).mean(axis=1)


def _setup_matplotlib():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "bowsim"
    return matplotlib


def _save_svg(fig, path: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


# ---------------------------------------------------------------------------
# subcommand pipelines


def run_fdm(cfg, raw, out_dir, seed) -> list[str]:
    import numpy as np

    from . import fdm

    fsec = raw.get("fdm", {})
    rate = float(fsec.get("sample_rate", 4_410_000.0))
    duration = float(fsec.get("duration", 0.1))
    ic = fdm.InitialCondition(float(fsec.get("p0", 0.0)), float(fsec.get("q0", 0.0)))
    traj = fdm.simulate(cfg, ic, rate, duration)
    files = ["trajectory.csv"]
    fdm.export_csv(traj, cfg, os.path.join(out_dir, "trajectory.csv"))
    if bool(fsec.get("residuals", True)):
        r1, r2 = fdm.residuals(traj, cfg)
        with open(os.path.join(out_dir, "residuals.csv"), "w") as fh:
            fh.write("t,r1,r2\n")
            t = traj.t
            for i in range(len(traj)):
                fh.write(f"{t[i]:.17g},{r1[i]:.17g},{r2[i]:.17g}\n")
        files.append("residuals.csv")
    return files


def run_train_pinn(cfg, raw, out_dir, seed) -> list[str]:
    from . import nets, train

    plan = _train_plan(raw, seed)
    s_t, s_pq = _scales(raw)
    windows, history = train.train_pinn(plan, cfg, s_t, s_pq,
                                        _ic_from(raw), **_net_args(raw))
    nets.save_checkpoint(os.path.join(out_dir, "model.ckpt"), windows,
                         extra={"seed": plan.seed, "mode": "pinn"})
    train.export_history(os.path.join(out_dir, "history.csv"), history)
    return ["model.ckpt", "history.csv"]


def _ic_from(raw):
    from .fdm import InitialCondition

    fsec = raw.get("fdm", {})
    return InitialCondition(float(fsec.get("p0", 0.0)), float(fsec.get("q0", 0.0)))


def _observations(cfg, raw, plan):
    from . import fdm
    from .train import ObservationSet

    t = raw.get("train", {})
    obs_t_max = float(t.get("obs_t_max", 0.1))
    obs_rate = float(t.get("obs_rate", 4_410_000.0))
    ic = fdm.InitialCondition(0.0, 0.0)
    traj = fdm.simulate(cfg, ic, obs_rate, obs_t_max)
    n_ob = plan.n_ob if plan.n_ob > 0 else 1000
    return ObservationSet.from_trajectory(traj, ic, n_ob)


def run_train_deeponet(cfg, raw, out_dir, seed, hybrid: bool) -> list[str]:
    from . import nets, train

    plan = _train_plan(raw, seed)
    s_t, s_pq = _scales(raw)
    na = _net_args(raw)
    c_out = int(raw.get("train", {}).get("c_out", 2 * na["width"]))
    dataset = train.build_deeponet_dataset(plan, s_t, s_pq)
    obs = _observations(cfg, raw, plan) if hybrid else None
    model, history = train.train_deeponet(
        plan, cfg, dataset, width=na["width"], depth=na["depth"],
        c_rff=na["c_rff"], c_out=c_out, sigma_prime=na["sigma_prime"],
        observations=obs, hybrid=hybrid)
    nets.save_checkpoint(os.path.join(out_dir, "model.ckpt"), model,
                         extra={"seed": plan.seed,
                                "mode": "hybrid" if hybrid else "deeponet"})
    train.export_history(os.path.join(out_dir, "history.csv"), history)
    return ["model.ckpt", "history.csv"]


def run_eval(cfg, raw, out_dir, seed) -> list[str]:
    from . import evaluation, nets

    e = raw.get("eval", {})
    if "checkpoint" not in e:
        raise ConfigFileError("[eval] needs a checkpoint path")
    model = nets.load_checkpoint(e["checkpoint"])
    if isinstance(model, list):
        raise ConfigFileError("eval mode expects a deeponet checkpoint")
    tset = evaluation.build_testset(
        cfg, model.scale_pq, float(e.get("t_max", model.scale_t)),
        int(e.get("n_cases", 20)),
        seed=int(seed if seed is not None else e.get("seed", 0)))
    report = evaluation.evaluate_testset(
        model, cfg, tset,
        reference_rate=float(e.get("reference_rate", 4_410_000.0)),
        n_points=int(e.get("n_points", 800)),
        nmse_normalization=str(e.get("nmse_normalization", "energy")),
        ncc_centered=bool(e.get("ncc_centered", False)))
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    return ["report.json"]


def _model_loss_fn(model, cfg, raw, seed):
    """Total-loss closure of a checkpointed model for spectra pipelines."""
    import numpy as np

    from . import nets, train

    sp = raw.get("spectra", {})
    n_colloc = int(sp.get("n_colloc", 200))
    rng = np.random.default_rng(int(seed if seed is not None else sp.get("seed", 0)))
    if isinstance(model, list):
        first = model[0]  # time-marching: diagnostics use the first window
        t_colloc = np.sort(first.t_start + rng.uniform(0, first.scale_t, n_colloc))
        from .fdm import InitialCondition
        ic = InitialCondition(0.0, 0.0)

        def loss_fn(tape, leaves):
            nodes = train.record_pinn_losses(tape, first, leaves, cfg, t_colloc, ic)
            return train.record_total_loss(tape, nodes, train.LossWeights.manual())
        return loss_fn, first.params
    groups = rng.uniform(-model.scale_pq, model.scale_pq, (max(n_colloc // 10, 4), 2))
    t_rows = rng.uniform(0, model.scale_t, n_colloc)
    gidx = rng.integers(0, groups.shape[0], n_colloc)

    def loss_fn(tape, leaves):
        nodes = train.record_deeponet_losses(tape, model, leaves, cfg, t_rows,
                                             gidx, groups)
        return train.record_total_loss(tape, nodes, train.LossWeights.manual())
    return loss_fn, model.params


def run_hessian(cfg, raw, out_dir, seed) -> list[str]:
    from . import nets, spectra

    sp = raw.get("spectra", {})
    if "checkpoint" not in sp:
        raise ConfigFileError("[spectra] needs a checkpoint path")
    model = nets.load_checkpoint(sp["checkpoint"])
    loss_fn, params = _model_loss_fn(model, cfg, raw, seed)
    spec = spectra.spectrum_density(
        loss_fn, params, probes=int(sp.get("probes", 8)),
        depth=int(sp.get("depth", 100)),
        seed=int(seed if seed is not None else sp.get("seed", 0)))
    spectra.export_density_csv(os.path.join(out_dir, "density.csv"), spec)
    top = spectra.top_eigenpairs(loss_fn, params, k=int(sp.get("top_k", 2)),
                                 seed=int(seed if seed is not None else sp.get("seed", 0)))
    with open(os.path.join(out_dir, "eigenvalues.json"), "w") as fh:
        json.dump({"eigenvalues": list(map(float, top.eigenvalues)),
                   "residuals": list(map(float, top.residuals))},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    return ["density.csv", "eigenvalues.json"]


def run_landscape(cfg, raw, out_dir, seed) -> list[str]:
    from . import nets, spectra

    sp = raw.get("spectra", {})
    if "checkpoint" not in sp:
        raise ConfigFileError("[spectra] needs a checkpoint path")
    model = nets.load_checkpoint(sp["checkpoint"])
    loss_fn, params = _model_loss_fn(model, cfg, raw, seed)
    top = spectra.top_eigenpairs(loss_fn, params, k=2,
                                 seed=int(seed if seed is not None else sp.get("seed", 0)))
    grid = spectra.landscape(loss_fn, params, top.eigenvectors[0],
                             top.eigenvectors[1],
                             grid_n=int(sp.get("grid_n", 21)))
    spectra.export_landscape_csv(os.path.join(out_dir, "landscape.csv"), grid)
    return ["landscape.csv"]


def run_synth(cfg, raw, out_dir, seed) -> list[str]:
    import numpy as np

    from . import fdm

    ssec = raw.get("synth", {})
    if "trajectory" in ssec:
        t, p, q, eta = fdm.read_csv(ssec["trajectory"])
        if len(t) < 2:
            raise ConfigFileError("trajectory too short to infer a sample rate")
        rate = 1.0 / (t[1] - t[0])
    else:
        rate = float(ssec.get("sample_rate", 4_410_000.0))
        duration = float(ssec.get("duration", 1.0))
        ic = fdm.InitialCondition(float(ssec.get("p0", 0.0)), float(ssec.get("q0", 0.0)))
        p = fdm.simulate(cfg, ic, rate, duration).p
    audio = decimate_to_audio(p, round(rate))
    write_wav(os.path.join(out_dir, "out.wav"), audio)
    return ["out.wav"]


PLOT_KINDS = ("friction", "trajectory", "residuals", "density", "landscape",
              "stickslip")


def run_plot(kind: str, data_files: list[str], cfg, out_dir) -> list[str]:
    import numpy as np

    _setup_matplotlib()
    import matplotlib.pyplot as plt

    from . import fdm as fdm_mod
    from . import friction as fr
    from . import spectra as sp_mod
    from .evaluation import stick_slip_segments
    from .friction import PhaseLabel

    for f in data_files:
        if not os.path.exists(f):
            raise ConfigFileError(f"input file not found: {f}")
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    if kind == "friction":
        a = cfg.friction.a
        eta = np.linspace(-0.5, 0.5, 1001)
        ax.plot(eta, fr.phi(eta, cfg.friction), label="force factor")
        ax.plot(eta, fr.dphi_deta(eta, cfg.friction) / np.sqrt(2 * a), label="slope (scaled)")
        b = fr.nonlinear_boundary(cfg.friction)
        ax.axvline(-b, color="gray", ls=":")
        ax.axvline(b, color="gray", ls=":")
        ax.set_xlabel("relative velocity eta [m/s]")
        ax.legend()
    elif kind == "trajectory":
        for f in data_files:
            t, p, q, _ = fdm_mod.read_csv(f)
            ax.plot(t, p, label=f"{os.path.basename(f)} p", lw=0.8)
            ax.plot(t, q, label=f"{os.path.basename(f)} q", lw=0.8)
        ax.set_xlabel("t [s]")
        ax.legend(fontsize=6)
    elif kind == "residuals":
        for f in data_files:
            data = np.genfromtxt(f, delimiter=",", skip_header=1)
            ax.semilogy(data[:, 0], np.abs(data[:, 1]) + 1e-300, lw=0.6,
                        label=f"{os.path.basename(f)} |r1|")
            ax.semilogy(data[:, 0], np.abs(data[:, 2]) + 1e-300, lw=0.6,
                        label=f"{os.path.basename(f)} |r2|")
        ax.set_xlabel("t [s]")
        ax.legend(fontsize=6)
    elif kind == "density":
        for f in data_files:
            data = np.genfromtxt(f, delimiter=",", skip_header=1)
            ax.semilogy(data[:, 0], data[:, 1] + 1e-300, lw=0.8)
        ax.set_xlabel("eigenvalue")
        ax.set_ylabel("density")
    elif kind == "landscape":
        grid = sp_mod.read_landscape_csv(data_files[0])
        im = ax.imshow(grid.losses, origin="lower", aspect="auto",
                       extent=(grid.betas[0], grid.betas[-1],
                               grid.alphas[0], grid.alphas[-1]))
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("beta")
        ax.set_ylabel("alpha")
    elif kind == "stickslip":
        t, p, q, eta = fdm_mod.read_csv(data_files[0])
        traj = fdm_mod.Trajectory(sample_rate=1.0 / (t[1] - t[0]), t0=t[0], p=p, q=q)
        ax.plot(t, eta, lw=0.7, color="black")
        for t0, t1, label in stick_slip_segments(traj, cfg):
            if label is PhaseLabel.SLIP:
                ax.axvspan(t0, t1, color="orange", alpha=0.3, lw=0)
        ax.set_xlabel("t [s]")
        ax.set_ylabel("eta [m/s]")
    else:
        raise ConfigFileError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    name = f"plot_{kind}.svg"
    _save_svg(fig, os.path.join(out_dir, name))
    plt.close(fig)
    return [name]


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bowsim",
        description="Bowed mass-spring oscillator: reference solver, "
                    "physics-informed neural solvers, diagnostics.")
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread cap (default 1, reproducible)")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("fdm", "train-pinn", "train-deeponet", "train-hybrid",
                 "eval", "hessian", "landscape", "synth"):
        sub.add_parser(mode)
    plot = sub.add_parser("plot")
    plot.add_argument("kind", choices=PLOT_KINDS)
    plot.add_argument("data", nargs="*", help="input data files")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    threads = str(max(args.threads, 1))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = threads

    raw = {}
    if args.config:
        try:
            raw = _load_toml(args.config)
            validate_config(raw, args.config)
        except ConfigFileError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except Exception as exc:  # TOML syntax errors carry line/column info
            print(f"config error: {args.config}: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    out_dir = args.out or raw.get("output", {}).get("dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    seed = args.seed if args.seed is not None else raw.get("train", {}).get("seed", 0)

    try:
        cfg = _scenario(raw)
        if args.mode == "fdm":
            files = run_fdm(cfg, raw, out_dir, seed)
        elif args.mode == "train-pinn":
            files = run_train_pinn(cfg, raw, out_dir, args.seed)
        elif args.mode == "train-deeponet":
            files = run_train_deeponet(cfg, raw, out_dir, args.seed, hybrid=False)
        elif args.mode == "train-hybrid":
            files = run_train_deeponet(cfg, raw, out_dir, args.seed, hybrid=True)
        elif args.mode == "eval":
            files = run_eval(cfg, raw, out_dir, args.seed)
        elif args.mode == "hessian":
            files = run_hessian(cfg, raw, out_dir, args.seed)
        elif args.mode == "landscape":
            files = run_landscape(cfg, raw, out_dir, args.seed)
        elif args.mode == "synth":
            files = run_synth(cfg, raw, out_dir, seed)
        elif args.mode == "plot":
            files = run_plot(args.kind, args.data, cfg, out_dir)
        else:  # unreachable: argparse restricts choices
            return EXIT_CONFIG
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        from .train import TrainingError
        if isinstance(exc, TrainingError):
            path = os.path.join(out_dir, "last_finite.ckpt")
            if exc.model is not None:
                from . import nets
                nets.save_checkpoint(path, exc.model, extra={"seed": seed})
            print(f"training failed: {exc}; checkpoint at {path}", file=sys.stderr)
            return EXIT_TRAINING
        if isinstance(exc, ValueError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    else:
        write_manifest(out_dir, args.mode, seed, files)
        return 0


if __name__ == "__main__":
    sys.exit(main())
