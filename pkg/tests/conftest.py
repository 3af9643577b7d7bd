import struct

import numpy as np
import pytest
from hypothesis import settings

from posttrain.toy import write_toy_workspace

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def raw_checkpoint(entries, meta=None, header_len=None, trailing=b""):
    """Hand-assemble a checkpoint file.

    ``entries`` is a list of (name, dtype tag, shape, payload bytes); ranges are
    laid out in the given order. Nothing from the package is used.
    """
    header, payload, cursor = {}, b"", 0
    for name, tag, shape, data in entries:
        header[name] = {"dtype": tag, "shape": list(shape), "offsets": [cursor, cursor + len(data)]}
        payload += data
        cursor += len(data)
    if meta is not None:
        header["__meta__"] = meta
    text = "{" + ",".join(f'"{k}":' + _json(header[k]) for k in sorted(header)) + "}"
    hb = text.encode()
    n = len(hb) if header_len is None else header_len
    return struct.pack("<Q", n) + hb + payload + trailing


def _json(v):
    if isinstance(v, dict):
        return "{" + ",".join(f'"{k}":' + _json(v[k]) for k in sorted(v)) + "}"
    if isinstance(v, list):
        return "[" + ",".join(_json(x) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v + '"'
    return str(v)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy(tmp_path):
    return write_toy_workspace(tmp_path / "toy")


# (criterion, check, passed, detail) rows appended by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit, check, ok, detail in ACCEPTANCE:
        tr.write_line(f"criterion {crit:2d} [{check}]: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))
    seen = {}
    for crit, _, ok, _ in ACCEPTANCE:
        seen[crit] = seen.get(crit, True) and ok
    for crit in range(1, 13):
        status = "not run" if crit not in seen else ("PASS" if seen[crit] else "FAIL")
        tr.write_line(f"criterion {crit:2d}: {status}")
