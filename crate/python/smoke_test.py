"""Builds the extension, imports it and runs a few quick checks.

Usage: python3 python/smoke_test.py
"""

import json
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "ktsim-python"], cwd=ROOT, check=True
    )
    lib = ROOT / "target" / "release" / "libpyktsim.so"
    out = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, out / "pyktsim.so")
    sys.path.insert(0, str(out))


def main():
    build()
    import pyktsim

    names = pyktsim.list_scenarios()
    assert "akm_c1_m10" in names, names

    exact, value = pyktsim.predict("akm", "c=1,m=10")
    assert exact == "1023/1024", exact
    assert abs(value - 0.9990234375) < 1e-12

    m = json.loads(pyktsim.run("short_lived_ktca", trials=20))
    assert m["short_lived_pom_rate"]["rate"] == 1.0, m["short_lived_pom_rate"]
    assert m["core_false_positives"] == 0

    acct = json.loads(pyktsim.account("accounting_reference"))
    assert acct["closed_form"]["ktca_per_epoch"] == 7136

    try:
        pyktsim.run("no_such_scenario")
    except ValueError as e:
        assert "no_such_scenario" in str(e)
    else:
        raise AssertionError("expected ValueError")

    print("pyktsim smoke test ok")


if __name__ == "__main__":
    main()
