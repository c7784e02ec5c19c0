import io
import os
import tarfile

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

os.environ.setdefault("COSOCO_FORGE_THREADS", "1")


def make_tar(members, fmt=tarfile.GNU_FORMAT):
    """Reference archive built with the standard library: ``[(name, bytes|None)]``, None = directory."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=fmt) as tf:
        for name, data in members:
            info = tarfile.TarInfo(name)
            info.mtime = 0
            if data is None:
                info.type = tarfile.DIRTYPE
                tf.addfile(info)
            else:
                info.size = len(data)
                tf.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def reference_offsets(data):
    """``{name: (header_offset, data_offset, size)}`` as tarfile sees them."""
    with tarfile.open(fileobj=io.BytesIO(data)) as tf:
        return {m.name: (m.offset, m.offset_data, m.size) for m in tf.getmembers()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_tar():
    return make_tar([
        ("etc/", None),
        ("etc/hosts", b"127.0.0.1 localhost\n"),
        ("bin/tool", bytes(range(256)) * 3),
        ("empty", b""),
    ])


# -- acceptance report -------------------------------------------------------

_ACCEPTANCE = []


def record(name, ok, detail):
    _ACCEPTANCE.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
