"""Named computation graphs plus a central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import NumericError, ShapeError, Value


class Graph:
    """A fixed computation over named trainable parameters and named inputs.

    `build(params, inputs)` receives dicts of Values and returns a dict of
    output Values. The graph is re-traced per forward call; tracing order is
    fixed by the build function, so repeated evaluation is bitwise stable.
    """

    def __init__(self, params: dict[str, np.ndarray], build,
                 input_names: tuple[str, ...] | None = None):
        self.params = {k: np.asarray(v) for k, v in params.items()}
        self.build = build
        self.input_names = input_names
        self._param_values: dict[str, Value] | None = None
        self._outputs: dict[str, Value] | None = None

    def forward(self, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self.input_names is not None:
            missing = set(self.input_names) - set(inputs)
            if missing:
                raise ShapeError(f"forward: missing inputs {sorted(missing)}")
        pv = {k: engine.parameter(v, name=k) for k, v in self.params.items()}
        iv = {k: engine.const(np.asarray(v)) for k, v in inputs.items()}
        outputs = self.build(pv, iv)
        self._param_values = pv
        self._outputs = outputs
        return {k: v.data for k, v in outputs.items()}

    def forward_value(self, inputs: dict[str, np.ndarray], output: str) -> float:
        """Fast scalar evaluation without building a tape."""
        with engine.no_grad(), engine.finite_checks(False):
            pv = {k: Value(v) for k, v in self.params.items()}
            iv = {k: Value(np.asarray(v)) for k, v in inputs.items()}
            return float(self.build(pv, iv)[output].data.reshape(-1)[0])

    def backward(self, output: str) -> dict[str, np.ndarray]:
        if self._outputs is None:
            raise RuntimeError("backward: call forward first")
        if output not in self._outputs:
            raise ShapeError(f"backward: unknown output {output!r}")
        out = self._outputs[output]
        if out.data.size != 1:
            raise ShapeError(f"backward: output {output!r} is not scalar")
        for v in self._param_values.values():
            v.zero_grad()
        out.backward()
        return {
            k: (v.grad.copy() if v.grad is not None else np.zeros_like(v.data))
            for k, v in self._param_values.items()
        }


@dataclass
class CoordError:
    parameter: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_parameter: str
    tol: float
    coords_checked: int
    failures: list[CoordError] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"{status}: max_rel_err={self.max_rel_err:.3e} "
            f"(tol={self.tol:.1e}) worst={self.worst_parameter} "
            f"coords={self.coords_checked}"
        ]
        for f in self.failures[:10]:
            lines.append(
                f"  {f.parameter}[{f.index}] analytic={f.analytic:.6e} "
                f"numeric={f.numeric:.6e} rel_err={f.rel_err:.3e}"
            )
        return "\n".join(lines)


def gradcheck(graph: Graph, inputs: dict[str, np.ndarray], output: str, *,
              seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
              coords_per_tensor: int = 64,
              corrupt_parameter: str | None = None) -> GradCheckReport:
    """Compare backward() against central finite differences.

    Samples at least `coords_per_tensor` coordinates of every parameter
    tensor (all coordinates for small tensors). Relative error is
    |a-n| / max(|a|,|n|,1e-8). `corrupt_parameter` injects a deliberate
    offset into that tensor's analytic gradient, for failure-path testing.
    """
    for name, p in graph.params.items():
        if p.dtype != np.float64:
            raise NumericError(f"gradcheck: parameter {name!r} is not float64")

    graph.forward(inputs)
    analytic = graph.backward(output)
    if corrupt_parameter is not None:
        if corrupt_parameter not in analytic:
            raise ShapeError(f"gradcheck: unknown parameter {corrupt_parameter!r}")
        analytic[corrupt_parameter] = analytic[corrupt_parameter] + 0.5

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = ""
    checked = 0
    failures: list[CoordError] = []
    for name, p in graph.params.items():
        flat = p.reshape(-1)
        n = flat.size
        if n <= coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=coords_per_tensor, replace=False))
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = graph.forward_value(inputs, output)
            flat[c] = orig - eps
            f_minus = graph.forward_value(inputs, output)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = name
            if rel > tol:
                failures.append(CoordError(name, int(c), a, numeric, rel))
    failures.sort(key=lambda f: -f.rel_err)
    return GradCheckReport(max_rel_err=max_rel, worst_parameter=worst,
                           tol=tol, coords_checked=checked, failures=failures)
