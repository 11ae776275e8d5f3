"""The command-line front end, driven end to end.

Everything the library does is reachable from one executable: simulate
writes trajectory CSVs, solve persists a value grid to a .vgrid file,
evaluate replays a stored grid as a feedback policy, compare races
policies under common random numbers, and lq tabulates the closed form.
This script shells out exactly as a user would, working in a scratch
directory.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

CLI = [sys.executable, "-m", "qubitfeedback"]


def run(*args):
    proc = subprocess.run(CLI + list(args), capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"exit {proc.returncode}: {proc.stderr.strip()}")
    return proc.stdout


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)

    print("$ qubitfeedback solve --model angle-lq --grid angle.vgrid ...")
    out = run("solve", "--model", "angle-lq", "--alpha", "0.5",
              "--horizon-t", "1.0", "--grid", str(tmp / "angle.vgrid"),
              "--n-nodes", "201", "--n-steps", "2500", "--no-timings")
    report = json.loads(out)
    print(f"  wrote {report['grid']}")
    print(f"  {report['slices']} slices, values in"
          f" [{report['value_min']:.4f}, {report['value_max']:.4f}]")
    print(f"  J(0, 1) = {report['j0_at_theta_1']:.6f}"
          "   (closed form: 0.602359)")
    print()

    print("$ qubitfeedback simulate --model angle-lq --policy grid:angle.vgrid ...")
    out = run("simulate", "--model", "angle-lq", "--x0", "1.0",
              "--policy", f"grid:{tmp / 'angle.vgrid'}",
              "--n-paths", "2000", "--dt", "0.01", "--seed", "1",
              "--csv", str(tmp / "path.csv"), "--no-timings")
    report = json.loads(out)
    print(f"  mean cost {report['mean_cost']:.4f} +- {report['stderr']:.4f}"
          f" over {report['n_paths']} paths")
    head = (tmp / "path.csv").read_text().splitlines()
    print(f"  sample path written: {head[0]}")
    print(f"                       {head[1]}")
    print()

    print("$ qubitfeedback evaluate --grid angle.vgrid ...")
    out = run("evaluate", "--grid", str(tmp / "angle.vgrid"), "--x0", "1.0",
              "--n-paths", "2000", "--dt", "0.01", "--seed", "1",
              "--no-timings")
    report = json.loads(out)
    print(f"  same grid replayed as a policy: mean cost {report['mean_cost']:.4f}")
    print()

    print("$ qubitfeedback compare --policy ... (common random numbers)")
    out = run("compare", "--model", "angle-lq", "--x0", "1.0",
              "--policy", "zero", "--policy", "constant:-0.4",
              "--policy", "lq-closed-form",
              "--policy", f"grid:{tmp / 'angle.vgrid'}",
              "--n-paths", "2000", "--dt", "0.01", "--seed", "1",
              "--no-timings")
    print("  " + "\n  ".join(out.strip().splitlines()))
    print()

    print("$ qubitfeedback lq --t 0 --theta -2:2:5")
    out = run("lq", "--t", "0", "--theta=-2:2:5", "--no-timings")
    print("  " + "\n  ".join(out.strip().splitlines()))
