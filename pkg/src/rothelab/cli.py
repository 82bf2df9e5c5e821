"""Command-line front end: config files, dt sweeps, and the report gate.

One TOML file describes a run completely -- grid, stepping, physics, wall
model, forcing, initial data, and sweep depth.  `parse_config` and
`serialize_config` are exact inverses on that description, and every
stochastic diagnostic draws from the single seed it records, so a command
invoked twice writes byte-identical files.

Subcommands:

  run-ns    one prescribed-motion run       -> ledger.csv + manifest
  run-fsi   one coupled run                 -> ledger.csv + manifest
  sweep     halving dt family               -> per-level ledgers + manifest
  diagnose  sweep + full diagnostics report -> scaling CSVs + report.json
  report    re-read a report.json and print one PASS/FAIL line per check

Exit codes: 0 all checks pass (or command completed), 1 a recorded check or
sweep level failed, 2 the command itself could not be executed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import _io, __version__
from .diagnostics import TrajectoryBundle, build_report, config_signature
from .geometry import ChannelMotion, ReferenceDomain, ShearMotion
from .rothe_fsi import FsiConfig, ShellParams, RunAborted, smooth_pulse
from .rothe_fsi import run as run_fsi
from .rothe_ns import NsConfig
from .rothe_ns import run as run_ns
from .spaces import write_field

__all__ = [
    "RunConfig",
    "parse_config",
    "serialize_config",
    "load_config",
    "to_ns_config",
    "to_fsi_config",
    "pressure_callable",
    "orchestrate_sweep",
    "main",
]

_MODES = ("ns", "fsi", "diagnose", "sweep")
_FORCINGS = ("none", "constant", "pulse", "multitone")
_INITIALS = ("zero", "modes")
_LAYOUTS = ("enclosed", "open")
_MOTIONS = ("none", "shear", "channel")
_SCHEMES = ("ns", "fsi")


@dataclass(frozen=True)
class RunConfig:
    """Flat, fully explicit description of one command's work."""

    mode: str = "fsi"
    seed: int = 0
    # grid
    nz: int = 32
    nr: int = 16
    length: float = 1.0
    # time
    dt: float = 0.01
    t_end: float = 1.0
    # physics
    mu: float = 1.0
    rho_f: float = 1.0
    # shell (coupled runs)
    rho_s: float = 1.0
    h_s: float = 1.0
    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    # forcing
    forcing: str = "none"
    amplitude: float = 0.0
    center: float = 0.25
    width: float = 0.1
    tones: int = 3
    base_period: float = 0.5
    p_out: float = 0.0
    # initial data
    initial: str = "zero"
    init_amp: float = 1.0
    init_seed: int = 7
    # prescribed-motion runs
    layout: str = "enclosed"
    motion: str = "none"
    motion_amp: float = 0.0
    motion_rate: float = 1.0
    # sweep / diagnose
    scheme: str = "fsi"
    levels: int = 4

    def __post_init__(self):
        checks = (
            ("mode", self.mode, _MODES),
            ("forcing.kind", self.forcing, _FORCINGS),
            ("initial.kind", self.initial, _INITIALS),
            ("domain.layout", self.layout, _LAYOUTS),
            ("domain.motion", self.motion, _MOTIONS),
            ("sweep.scheme", self.scheme, _SCHEMES),
        )
        for path, val, allowed in checks:
            if val not in allowed:
                raise ValueError(f"{path} must be one of {allowed}, got {val!r}")
        if self.levels < 1:
            raise ValueError(f"sweep.levels must be >= 1, got {self.levels}")
        if self.seed < 0 or self.init_seed < 0:
            raise ValueError("seeds must be non-negative")


# section -> toml key -> (attribute, type); the one place the layout lives
_SCHEMA = {
    None: {"mode": ("mode", str), "seed": ("seed", int)},
    "grid": {"nz": ("nz", int), "nr": ("nr", int), "length": ("length", float)},
    "time": {"dt": ("dt", float), "t_end": ("t_end", float)},
    "physics": {"mu": ("mu", float), "rho_f": ("rho_f", float)},
    "shell": {k: (k, float) for k in ("rho_s", "h_s", "c0", "c1", "c2")},
    "forcing": {
        "kind": ("forcing", str),
        "amplitude": ("amplitude", float),
        "center": ("center", float),
        "width": ("width", float),
        "tones": ("tones", int),
        "base_period": ("base_period", float),
        "p_out": ("p_out", float),
    },
    "initial": {
        "kind": ("initial", str),
        "amp": ("init_amp", float),
        "seed": ("init_seed", int),
    },
    "domain": {
        "layout": ("layout", str),
        "motion": ("motion", str),
        "motion_amp": ("motion_amp", float),
        "motion_rate": ("motion_rate", float),
    },
    "sweep": {"scheme": ("scheme", str), "levels": ("levels", int)},
}


def _coerce(path, value, want):
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{path} must be an integer, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{path} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"{path} must be a string, got {value!r}")
    return value


def parse_config(text: str) -> RunConfig:
    """TOML text -> RunConfig; unknown keys are errors naming their path."""
    data = _io.loads_toml(text)
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, dict):
            spec = _SCHEMA.get(key)
            if spec is None:
                raise ValueError(f"unknown section: {key}")
            for k, v in value.items():
                if k not in spec:
                    raise ValueError(f"unknown key: {key}.{k}")
                attr, want = spec[k]
                kwargs[attr] = _coerce(f"{key}.{k}", v, want)
        else:
            spec = _SCHEMA[None]
            if key not in spec:
                raise ValueError(f"unknown key: {key}")
            attr, want = spec[key]
            kwargs[attr] = _coerce(key, value, want)
    return RunConfig(**kwargs)


def serialize_config(cfg: RunConfig) -> str:
    """RunConfig -> full explicit TOML text (parse round-trips exactly)."""
    vals = asdict(cfg)
    sections = {}
    for section, spec in _SCHEMA.items():
        body = {k: vals[attr] for k, (attr, _) in spec.items()}
        sections[section] = body
    return _io.dumps_toml(sections)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


# ──────────────────────────────────────────────────────────────────────
#  building scheme configs out of the run description
# ──────────────────────────────────────────────────────────────────────

def multitone(amplitude, n_tones, base_period):
    """Deterministic multi-frequency pressure signal.

    Tone k has period base_period / 2^k and amplitude proportional to the
    square root of that period, so slower tones carry larger wall excursions.
    """
    phases = (0.0, 1.3, 2.1, 0.7, 2.9, 1.7, 0.4, 2.3)
    parts = []
    for k in range(n_tones):
        period = base_period / 2 ** k
        parts.append((math.sqrt(period), 2.0 * math.pi / period,
                      phases[k % len(phases)]))

    def p(t):
        return amplitude * sum(w * math.sin(om * t + ph) for w, om, ph in parts)

    return p


def pressure_callable(cfg: RunConfig):
    """Inlet pressure described by the forcing section (float or callable)."""
    if cfg.forcing == "none":
        return 0.0
    if cfg.forcing == "constant":
        return cfg.amplitude
    if cfg.forcing == "pulse":
        return smooth_pulse(cfg.amplitude, center=cfg.center, width=cfg.width)
    return multitone(cfg.amplitude, cfg.tones, cfg.base_period)


def _motion(cfg: RunConfig):
    if cfg.motion == "none":
        return None
    dom = ReferenceDomain(L=cfg.length)
    if cfg.motion == "shear":
        return ShearMotion(dom, amp=cfg.motion_amp, omega=cfg.motion_rate)
    return ChannelMotion(dom, amp=cfg.motion_amp, omega=cfg.motion_rate)


def to_ns_config(cfg: RunConfig, dt=None) -> NsConfig:
    if cfg.forcing != "none" and cfg.layout != "open":
        raise ValueError("forcing.kind: pressure forcing needs domain.layout "
                         "= 'open' for prescribed-motion runs")
    p_in = cfg.amplitude if cfg.forcing == "constant" else 0.0
    if cfg.forcing in ("pulse", "multitone"):
        raise ValueError("forcing.kind: prescribed-motion runs take constant "
                         "pressure drops only")
    return NsConfig(
        nz=cfg.nz, nr=cfg.nr, dt=dt if dt is not None else cfg.dt,
        t_end=cfg.t_end, mu=cfg.mu, motion=_motion(cfg), layout=cfg.layout,
        L=cfg.length, initial=cfg.initial, init_amp=cfg.init_amp,
        init_seed=cfg.init_seed, p_in=p_in, p_out=cfg.p_out,
    )


def to_fsi_config(cfg: RunConfig, dt=None) -> FsiConfig:
    shell = ShellParams(rho_s=cfg.rho_s, h_s=cfg.h_s, c0=cfg.c0, c1=cfg.c1,
                        c2=cfg.c2)
    return FsiConfig(
        nz=cfg.nz, nr=cfg.nr, dt=dt if dt is not None else cfg.dt,
        t_end=cfg.t_end, rho_f=cfg.rho_f, mu=cfg.mu, shell=shell,
        p_in=pressure_callable(cfg), p_out=cfg.p_out, L=cfg.length,
        initial=cfg.initial, init_amp=cfg.init_amp, init_seed=cfg.init_seed,
    )


def _run_one(cfg: RunConfig, scheme: str, dt=None):
    if scheme == "ns":
        return run_ns(to_ns_config(cfg, dt=dt))
    return run_fsi(to_fsi_config(cfg, dt=dt))


def _write_ledger(path, traj):
    rows = traj.ledger
    header = type(rows[0]).COLUMNS if rows else ()
    _io.write_csv(path, header, [r.as_tuple() for r in rows])


# ──────────────────────────────────────────────────────────────────────
#  the sweep
# ──────────────────────────────────────────────────────────────────────

def _persist_level(level_dir, traj):
    level_dir.mkdir(parents=True, exist_ok=True)
    _write_ledger(level_dir / "ledger.csv", traj)
    disp = traj.displacements
    if disp is not None:
        header = ["n"] + [f"eta_{i}" for i in range(disp.shape[1])]
        _io.write_csv(level_dir / "displacements.csv", header,
                      [(n, *row) for n, row in enumerate(disp)])
    write_field(level_dir / "final_field.txt", traj.fields[-1], dt=traj.dt)


def orchestrate_sweep(cfg: RunConfig, out_dir=None, levels=None):
    """Run the halving-dt family; return (bundle-or-None, level records).

    Level k divides the configured step by 2^k.  Levels that abort are
    recorded (status "failed" plus the message) rather than raised; a bundle
    is assembled when at least three levels survive, otherwise None is
    returned with the records telling why.  With out_dir set, every level
    that completes persists its ledger, displacement table, and final
    snapshot under level_k/.
    """
    levels = cfg.levels if levels is None else int(levels)
    if levels < 3:
        raise ValueError(f"sweep needs at least 3 levels, got {levels}")
    scheme = cfg.mode if cfg.mode in ("ns", "fsi") else cfg.scheme
    n0 = round(cfg.t_end / cfg.dt)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    records, good = [], []
    for k in range(levels):
        dt_k = cfg.t_end / (n0 * 2 ** k)
        rec = {"level": k, "dt": dt_k, "status": "ok"}
        try:
            traj = _run_one(cfg, scheme, dt=dt_k)
        except (RunAborted, ValueError) as exc:
            rec["status"] = "failed"
            rec["error"] = str(exc)
        else:
            good.append(traj)
            rec["signature"] = config_signature(traj.config)
            if out_dir is not None:
                _persist_level(out_dir / f"level_{k}", traj)
                rec["ledger"] = f"level_{k}/ledger.csv"
        records.append(rec)
    bundle = TrajectoryBundle(good) if len(good) >= 3 else None
    return bundle, records


# ──────────────────────────────────────────────────────────────────────
#  commands
# ──────────────────────────────────────────────────────────────────────

def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(serialize_config(cfg))
    return cfg, out


def _cmd_run(args, scheme):
    cfg, out = _prepare(args)
    try:
        traj = _run_one(cfg, scheme)
    except (RunAborted, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    _write_ledger(out / "ledger.csv", traj)
    _io.write_manifest(out, {"mode": scheme, "version": __version__, "levels": [
        {"level": 0, "dt": traj.dt, "status": "ok", "ledger": "ledger.csv",
         "signature": config_signature(traj.config)}]})
    print(f"{scheme}: {traj.n_steps} steps -> {out / 'ledger.csv'}")
    return 0


def _cmd_sweep(args):
    cfg, out = _prepare(args)
    if args.jobs not in (None, 1):
        print("note: runs are serialized in this build; --jobs ignored",
              file=sys.stderr)
    try:
        bundle, records = orchestrate_sweep(cfg, out_dir=out, levels=args.levels)
    except ValueError as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return 2
    _io.write_manifest(out, {"mode": "sweep", "version": __version__,
                             "levels": records, "bundle": bundle is not None})
    failed = [r for r in records if r["status"] != "ok"]
    for r in records:
        print(f"level {r['level']}: dt={r['dt']!r} {r['status']}")
    if bundle is None:
        print("sweep failed: fewer than 3 levels survived", file=sys.stderr)
        return 2
    return 1 if failed else 0


def _cmd_diagnose(args):
    cfg, out = _prepare(args)
    if args.jobs not in (None, 1):
        print("note: runs are serialized in this build; --jobs ignored",
              file=sys.stderr)
    try:
        bundle, records = orchestrate_sweep(cfg, out_dir=out, levels=args.levels)
        if bundle is None:
            _io.write_manifest(out, {"mode": "diagnose", "version": __version__,
                                     "levels": records, "bundle": False})
            print("diagnose failed: fewer than 3 levels survived",
                  file=sys.stderr)
            return 2
        rep = build_report(bundle, seed=cfg.seed, out_dir=out)
    except ValueError as exc:
        print(f"diagnose failed: {exc}", file=sys.stderr)
        return 2
    _io.write_manifest(out, {"mode": "diagnose", "version": __version__,
                             "levels": records, "bundle": True,
                             "all_pass": rep.all_pass})
    _print_passes(rep.passes)
    return 0 if rep.all_pass else 1


def _print_passes(passes):
    for key in sorted(passes):
        print(f"{'PASS' if passes[key] else 'FAIL'} {key}")


def _cmd_report(args):
    path = Path(args.out) / "report.json"
    if not path.is_file():
        print(f"no report at {path}", file=sys.stderr)
        return 2
    payload = json.loads(path.read_text())
    _print_passes(payload["passes"])
    print(f"levels: {len(payload['signatures'])}, "
          f"all_pass: {payload['all_pass']}")
    return 0 if payload["all_pass"] else 1


def build_parser():
    p = argparse.ArgumentParser(prog="rothelab",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False, levels=False):
        sp.add_argument("--config", required=True, help="TOML run description")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
        if levels:
            sp.add_argument("--levels", type=int, default=None,
                            help="override sweep depth")
        if jobs:
            sp.add_argument("--jobs", type=int, default=None,
                            help="worker count (reserved; runs serialize)")

    common(sub.add_parser("run-ns", help="one prescribed-motion run"))
    common(sub.add_parser("run-fsi", help="one coupled run"))
    common(sub.add_parser("sweep", help="halving-dt family"),
           jobs=True, levels=True)
    common(sub.add_parser("diagnose", help="sweep plus diagnostics report"),
           jobs=True, levels=True)
    rp = sub.add_parser("report", help="print PASS/FAIL lines of a report")
    rp.add_argument("--out", required=True, help="directory with report.json")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run-ns":
            return _cmd_run(args, "ns")
        if args.command == "run-fsi":
            return _cmd_run(args, "fsi")
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "diagnose":
            return _cmd_diagnose(args)
        return _cmd_report(args)
    except Exception as exc:              # noqa: BLE001 - the CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
