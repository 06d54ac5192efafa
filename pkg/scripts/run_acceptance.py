#!/usr/bin/env python3
"""Run the acceptance suite and print one PASS/FAIL line per criterion."""
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"],
        capture_output=True,
        text=True,
        cwd=ROOT,
    )
    lines = [l for l in proc.stdout.splitlines() if l.startswith(("PASS ", "FAIL "))]
    for l in lines:
        print(l)
    if proc.returncode != 0 and not any(l.startswith("FAIL") for l in lines):
        # collection or import errors never reach the verdict lines
        sys.stdout.write(proc.stdout[-4000:])
    print(f"{sum(l.startswith('PASS') for l in lines)}/{len(lines)} passed")
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
