# The compactness battery on a small dt family
# ============================================
#
# The diagnostics module treats a *family* of runs over halved time steps
# as one object and measures everything a compactness argument would ask
# of it: uniform energy bounds, the dt-scaling of the numerical
# dissipation, time-shift equicontinuity uniformly across the family,
# dual-norm decay of shifted differences, the squeezing error rate, and
# interpolation constants on the moving-domain envelopes.
#
# This demo drives the whole battery through the same entry point the
# command line uses, then renders every table it wrote into figures.

import subprocess
import sys
import tempfile
from pathlib import Path

from rothelab.cli import RunConfig, serialize_config, main

work = Path(tempfile.mkdtemp(prefix="battery_"))
cfg = RunConfig(mode="diagnose", nz=16, nr=8, dt=0.02, t_end=0.5, mu=1.0,
                forcing="multitone", amplitude=1.5, tones=4,
                base_period=0.08, levels=3)
cfg_path = work / "battery.toml"
cfg_path.write_text(serialize_config(cfg))

out = work / "run"
code = main(["diagnose", "--config", str(cfg_path), "--out", str(out)])

# Exit code 1 means "ran fine, some tolerance failed" — expected here:
# a half-second horizon at this grid is a smoke run, not the tuned
# reference family, and the report says so honestly.
print(f"diagnose exit code : {code}")
for line in sorted(p.name for p in out.iterdir()):
    print(f"  wrote {line}")

report = (out / "report.json").read_text()
print(f"report size        : {len(report)} bytes")

# The figure package is a separate console script ("plots"); it consumes
# only the CSV files and report.json written above.

rc = subprocess.run([sys.executable, "-m", "rotheplots.cli",
                     "all", "--bundle", str(out)]).returncode
print(f"plots exit code    : {rc}")
for fig in sorted((out / "figures").glob("*.svg")):
    print(f"  figure {fig.name}")
