# SPDX-License-Identifier: Apache-2.0
"""End-to-end checks of the qtx command line: usage: check_cli.py QTX WORKDIR"""

import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

QTX = sys.argv[1]
WORK = Path(sys.argv[2])
failures = []


def qtx(*args, expect=0):
    p = subprocess.run([QTX, *map(str, args)], capture_output=True, text=True)
    if p.returncode != expect:
        failures.append(f"qtx {' '.join(map(str, args))}: exit {p.returncode}, wanted {expect}\n{p.stderr}")
    return p


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        failures.append(what)


shutil.rmtree(WORK, ignore_errors=True)
WORK.mkdir(parents=True)
pkg = WORK / "pkg"

qtx("fit", "--package", pkg, "--seed", 7, "--layers", 1, "--report", WORK / "fit.json")
fit = json.loads((WORK / "fit.json").read_text())
check(fit["exp"]["max_abs_err"] < 0.01 and fit["erf"]["max_abs_err"] < 0.01, "fit report carries gated errors")
check((pkg / "manifest.json").is_file(), "fit writes a package manifest")

p = qtx("run", "--package", pkg, expect=2)
err = json.loads(p.stderr)
check(err["error"]["kind"] == "usage", "run on an uncalibrated package is a usage error")

qtx("calibrate", "--package", pkg, "--seed", 7, "--samples", 16, "--report", WORK / "cal.json")
cal = json.loads((WORK / "cal.json").read_text())
check("L0.in" in cal["junction_max_abs"], "calibration report lists junction ranges")

# Same inputs, same bytes.
runs = [qtx("run", "--package", pkg, "--seed", 3, "--trace", WORK / f"t{i}.txt").stdout for i in range(3)]
traces = [(WORK / f"t{i}.txt").read_bytes() for i in range(3)]
check(len(set(runs)) == 1 and len(set(traces)) == 1, "run reports and traces are byte-identical")
report = json.loads(runs[0])
check(report["cycles"]["sqrt_iterations"] == "measured", "run report uses measured sqrt iterations")

trace = traces[0].decode().splitlines()
check(trace[0].endswith("L0.MHSA Start") and trace[-1].endswith("L0.LN2 Done"), "trace brackets the layer")

# Zero input: every input code is zero.
z = json.loads(qtx("run", "--package", pkg, "--input", "zeros").stdout)
m, d = 16, 64
check(z["input"]["digest"].startswith(f"{m}x{d}:"), "zero-input digest has the input shape")
zeros_digest = json.loads(qtx("run", "--package", pkg, "--input", "zeros").stdout)["input"]["digest"]
check(zeros_digest == z["input"]["digest"], "zero-input digest is stable")

# Metrics recomputed from the raw dumps.
cmp = json.loads(qtx("compare", "--package", pkg, "--seed", 3, "--dump-dir", WORK / "dump").stdout)
a = np.fromfile(WORK / "dump" / "integer_output.f64", dtype="<f8").reshape(m, d)
b = np.fromfile(WORK / "dump" / "float_output.f64", dtype="<f8").reshape(m, d)
got = cmp["integer_vs_float"]
cos = float(a.ravel() @ b.ravel() / (np.linalg.norm(a) * np.linalg.norm(b)))
check(abs(got["max_abs_err"] - np.abs(a - b).max()) < 1e-12, "max_abs_err matches the dumps")
check(abs(got["mean_abs_err"] - np.abs(a - b).mean()) < 1e-12, "mean_abs_err matches the dumps")
check(abs(got["cosine_similarity"] - cos) < 1e-12, "cosine matches the dumps")
check(abs(got["argmax_agreement"] - float(np.mean(a.argmax(1) == b.argmax(1)))) < 1e-12, "argmax agreement matches")
check(cmp["output_digest"] == report["output_digest"], "compare and run agree on the output digest")

# Timing overrides change cycles but not numerics.
hp = json.loads(qtx("run", "--package", pkg, "--seed", 3, "--heads-parallel", 1, "--tile", "8x8").stdout)
check(hp["output_digest"] == report["output_digest"], "parallelism and tiling leave outputs unchanged")
check(hp["cycles"]["total_cycles"] > report["cycles"]["total_cycles"], "serial heads on a small tile take longer")

# Cycle model.
c = qtx("cycles", "--config", "roberta-base")
check("clock: 7 ns (143 MHz)" in c.stdout, "cycles prints the 143 MHz clock line")
c2 = qtx("cycles", "--config", "roberta-base", "--clock-ns", 14)
lat = lambda out: float(next(l for l in out.splitlines() if l.startswith("latency:")).split()[1])
check(abs(lat(c2.stdout) - 2 * lat(c.stdout)) < 1e-3, "doubling the clock period doubles latency")
configs = Path(__file__).resolve().parents[2] / "configs"
c3 = qtx("cycles", "--config", configs / "roberta-base.json")
check(c3.stdout.replace(str(configs / "roberta-base.json"), "") == c.stdout, "roberta-base.json matches the preset")
qtx("cycles", "--config", "toy", "--trace", WORK / "cyc.txt")
check((WORK / "cyc.txt").read_text().startswith("0 L0.MHSA Start"), "cycles writes a trace")

# Error kinds and exit codes.
for args, kind, code in [
    (["cycles", "--tile", "0x4"], "usage", 2),
    (["cycles", "--bogus"], "usage", 2),
    (["cycles", "--config", WORK / "missing.json"], "format", 4),
    (["run", "--package", WORK / "nope"], "format", 4),
    (["run", "--package", pkg, "--layers", 3], "usage", 2),
]:
    p = qtx(*args, expect=code)
    try:
        check(json.loads(p.stderr)["error"]["kind"] == kind, f"{' '.join(map(str, args))} -> {kind}")
    except json.JSONDecodeError:
        check(False, f"{' '.join(map(str, args))} prints a JSON error")

bad = WORK / "bad.json"
bad.write_text('{"d": 10, "k_heads": 3}')
p = qtx("cycles", "--config", bad, expect=2)
check(json.loads(p.stderr)["error"]["kind"] == "usage", "inconsistent config is a usage error")

if failures:
    print("\n".join(["", "failures:"] + failures))
    sys.exit(1)
print("all CLI checks passed")
