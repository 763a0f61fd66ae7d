"""Mean-field backward stochastic LQ control on binomial scenario trees."""

import json as _json
import os as _os

from ._core import Error, brownian
from ._core import riccati as _riccati
from ._core import solve_qp as _solve_qp
from ._core import validate as _validate
from ._core import run as _run

__all__ = ["Error", "brownian", "load", "riccati", "run", "solve_qp", "validate"]


def load(spec):
    """Spec as a JSON string: accepts a path, a JSON string or a dict."""
    if isinstance(spec, dict):
        return _json.dumps(spec)
    if isinstance(spec, (str, _os.PathLike)) and _os.path.exists(spec):
        with open(spec) as f:
            return f.read()
    return spec


def run(spec, nt, with_oracle=False, outer="conditions"):
    """Full pipeline. Returns the report dict plus per-level "u", "Y", "Z", "X" arrays."""
    out = _run(load(spec), nt, with_oracle, outer)
    result = _json.loads(out.pop("report"))
    result.update(out)
    return result


def solve_qp(spec, nt):
    """Exact discrete optimum (QP oracle)."""
    return _solve_qp(load(spec), nt)


def riccati(spec, nt):
    return _riccati(load(spec), nt)


def validate(spec, nt=1):
    """(passed, summary) of the standing assumptions."""
    return _validate(load(spec), nt)
