import numpy as np
import pytest

from vaeflow import autodiff as ad
from vaeflow.config import ModelConfig
from vaeflow.rng import RngStream


@pytest.fixture
def f64():
    with ad.precision(64):
        yield


@pytest.fixture
def f32():
    with ad.precision(32):
        yield


def dense_jacobian(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a flat map R^D -> R^D (test oracle)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(d_z=2, enc_width=2, dec_width=2, res_depth=1, glow_depth=1, glow_hidden=4,
                prior_depth=2, prior_hidden=4, fold="off", decoder_log_var_init=-1.0)
    base.update(kw)
    return ModelConfig(**base)


def randomize(params, rng: RngStream, scale: float = 0.3) -> None:
    """Overwrite every parameter with small random values (breaks identity inits)."""
    for p in params.values():
        p.value[...] = rng.normal(p.shape, dtype=p.dtype) * scale


# --- acceptance summary: one line per criterion ---------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    if call.when == "call":
        entry["ran"] = True
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, val in report.user_properties:
        if key == "criterion_note":
            n, note = val
            _CRITERIA.setdefault(n, {"title": "", "ok": True, "ran": False, "notes": []})["notes"].append(note)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] or not e["ok"] else "NOT RUN")
        notes = f"  ({'; '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {n:>2} {status}  {e['title']}{notes}")
