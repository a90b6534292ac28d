"""Smoke test for the Python extension.

Build first with `cargo build --release -p autodalk-py`, then run
`python3 python/smoke_test.py`. The shared library is loaded straight from
target/release, so no install step is needed.
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    lib = ROOT / "target" / "release" / "libautodalk_py.so"
    if not lib.exists():
        sys.exit(f"missing {lib}; run cargo build --release -p autodalk-py")
    loader = importlib.machinery.ExtensionFileLoader("autodalk_py", str(lib))
    spec = importlib.util.spec_from_loader("autodalk_py", loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def main():
    ad = load()

    # air above the epithelium, tissue index below
    assert math.isclose(ad.refract_correct(1321.0, 1.321), 1000.0, rel_tol=1e-12)

    frame = ad.encode_trace(5, 123, 10.0, 450.0, 300.0, 3, 17)
    kind, seq, used = ad.decode_frame(bytes(frame))
    assert (kind, seq, used) == ("trace", 5, len(frame))
    bad = bytearray(frame)
    bad[30] ^= 0x01
    try:
        ad.decode_frame(bytes(bad))
    except ValueError:
        pass
    else:
        raise AssertionError("corrupted frame accepted")

    result = json.loads(ad.run_trial(7))
    assert result["seed"] == 7
    assert not result["perforated"], result
    print(f"trial: final gap {result['final_gap_um']:.1f} um in {result['ticks']} frames")

    iso = json.loads(ad.iso_bench(3))
    print(f"iso: repeatability {iso['repeatability']:.2f} um, accuracy {iso['accuracy']:.2f} um")
    print("ok")


if __name__ == "__main__":
    main()
