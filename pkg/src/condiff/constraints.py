"""Differentiable inequality constraints g(x) <= 0 with projections.

Point-level constraints (halfspaces, balls, axis bounds, custom callables)
are broadcast over trajectory states or applied to whole vectors through
constraint groups; discrete-barrier pair constraints couple consecutive
states. A ConstraintSet stacks groups, evaluates raw or smoothed values,
accumulates multiplier-weighted gradients, and projects points back to
feasibility (closed forms where available, cyclic Newton sweeps plus a
penalty-descent fallback otherwise).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ._validation import as_float_array

__all__ = [
    "InfeasibleProjection",
    "Constraint",
    "Halfspace",
    "BallInterior",
    "BallExterior",
    "AxisBound",
    "CustomConstraint",
    "Subspace",
    "Barrier",
    "ConstraintSet",
    "dcbf_trajectory_constraints",
    "dcbf_satisfied",
    "build_barrier",
    "load_constraints",
    "save_constraints",
]

PROJECTION_TOL = 1e-9
SMOOTHINGS = ("raw", "hinge", "sigmoid")


class InfeasibleProjection(RuntimeError):
    """Raised when the projection budget is exhausted; carries the best iterate."""

    def __init__(self, best, residual):
        super().__init__(f"projection failed to reach feasibility (residual {residual:.3e})")
        self.best = best
        self.residual = residual


def _stable_sigmoid(g):
    out = np.empty_like(g)
    pos = g >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-g[pos]))
    e = np.exp(g[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def smooth_value(raw, kind):
    """Apply a smoothing tag: raw, hinge max(0, g), or the sigmoid surrogate g*sig(g)."""
    if kind == "raw":
        return raw
    if kind == "hinge":
        return np.maximum(raw, 0.0)
    if kind == "sigmoid":
        return raw * _stable_sigmoid(raw)
    raise ValueError(f"unknown smoothing {kind!r}; expected one of {SMOOTHINGS}")


def smooth_deriv(raw, kind):
    """d(smoothed)/d(raw); hinge uses subgradient 0 at the kink."""
    if kind == "raw":
        return np.ones_like(raw)
    if kind == "hinge":
        return (raw > 0.0).astype(float)
    if kind == "sigmoid":
        s = _stable_sigmoid(raw)
        return s + raw * s * (1.0 - s)
    raise ValueError(f"unknown smoothing {kind!r}; expected one of {SMOOTHINGS}")


# ---------------------------------------------------------------------------
# Point-level constraints
# ---------------------------------------------------------------------------

class Constraint:
    """Scalar inequality g(x) <= 0 on points, batch-evaluated on (k, nd) arrays."""

    def value(self, pts):
        raise NotImplementedError

    def grad(self, pts):
        raise NotImplementedError

    def project(self, pts):
        """Closed-form Euclidean projection, or None when unavailable."""
        return None

    def to_spec(self):
        raise ValueError(f"{type(self).__name__} has no file representation")


class Halfspace(Constraint):
    """a . x - b <= 0."""

    def __init__(self, a, b):
        self.a = as_float_array(a, ndim=1, name="a")
        if np.linalg.norm(self.a) == 0.0:
            raise ValueError("halfspace normal must be nonzero")
        self.b = float(b)

    def value(self, pts):
        return pts @ self.a - self.b

    def grad(self, pts):
        return np.broadcast_to(self.a, pts.shape).copy()

    def project(self, pts):
        viol = self.value(pts)
        out = pts.copy()
        mask = viol > 0.0
        if np.any(mask):
            out[mask] -= np.outer(viol[mask] / (self.a @ self.a), self.a)
        return out

    def to_spec(self):
        return {"type": "halfspace", "a": self.a.tolist(), "b": self.b}


class _Ball(Constraint):
    def __init__(self, center, radius):
        self.center = as_float_array(center, ndim=1, name="center")
        self.radius = float(radius)
        if self.radius <= 0.0:
            raise ValueError("radius must be strictly positive")


class BallInterior(_Ball):
    """||x - c||^2 - r^2 <= 0 (feasible inside the ball)."""

    def value(self, pts):
        d = pts - self.center
        return np.sum(d * d, axis=1) - self.radius ** 2

    def grad(self, pts):
        return 2.0 * (pts - self.center)

    def project(self, pts):
        d = pts - self.center
        dist = np.linalg.norm(d, axis=1)
        out = pts.copy()
        mask = dist > self.radius
        if np.any(mask):
            out[mask] = self.center + d[mask] * (self.radius / dist[mask])[:, None]
        return out

    def to_spec(self):
        return {"type": "ball_interior", "center": self.center.tolist(), "radius": self.radius}


class BallExterior(_Ball):
    """r^2 - ||x - c||^2 <= 0 (feasible outside the ball)."""

    def value(self, pts):
        d = pts - self.center
        return self.radius ** 2 - np.sum(d * d, axis=1)

    def grad(self, pts):
        return -2.0 * (pts - self.center)

    def project(self, pts):
        d = pts - self.center
        dist = np.linalg.norm(d, axis=1)
        out = pts.copy()
        mask = dist < self.radius
        if np.any(mask):
            # deterministic tie-break at the center: push along the first axis
            singular = mask & (dist < 1e-12)
            if np.any(singular):
                d = d.copy()
                d[singular] = 0.0
                d[singular, 0] = 1.0
                dist = np.where(singular, 1.0, dist)
            out[mask] = self.center + d[mask] * (self.radius / dist[mask])[:, None]
        return out

    def to_spec(self):
        return {"type": "ball_exterior", "center": self.center.tolist(), "radius": self.radius}


class AxisBound(Constraint):
    """One-sided bound on a single coordinate."""

    def __init__(self, axis, bound, side="upper"):
        if side not in ("upper", "lower"):
            raise ValueError("side must be 'upper' or 'lower'")
        self.axis = int(axis)
        self.bound = float(bound)
        self.side = side

    def value(self, pts):
        x = pts[:, self.axis]
        return x - self.bound if self.side == "upper" else self.bound - x

    def grad(self, pts):
        g = np.zeros_like(pts)
        g[:, self.axis] = 1.0 if self.side == "upper" else -1.0
        return g

    def project(self, pts):
        out = pts.copy()
        if self.side == "upper":
            out[:, self.axis] = np.minimum(out[:, self.axis], self.bound)
        else:
            out[:, self.axis] = np.maximum(out[:, self.axis], self.bound)
        return out

    def to_spec(self):
        return {"type": "axis_bound", "axis": self.axis, "bound": self.bound, "side": self.side}


class CustomConstraint(Constraint):
    """Batch callables: fn(pts)->(k,), grad_fn(pts)->(k, nd), optional projection."""

    def __init__(self, fn, grad_fn, project_fn=None):
        self.fn = fn
        self.grad_fn = grad_fn
        self.project_fn = project_fn

    def value(self, pts):
        return np.asarray(self.fn(pts), dtype=float)

    def grad(self, pts):
        return np.asarray(self.grad_fn(pts), dtype=float)

    def project(self, pts):
        if self.project_fn is None:
            return None
        return np.asarray(self.project_fn(pts), dtype=float)


class Subspace(Constraint):
    """Apply a constraint to a coordinate subset of each point."""

    def __init__(self, inner, dims):
        self.inner = inner
        self.dims = tuple(int(d) for d in dims)

    def value(self, pts):
        return self.inner.value(pts[:, self.dims])

    def grad(self, pts):
        g = np.zeros_like(pts)
        g[:, self.dims] = self.inner.grad(pts[:, self.dims])
        return g

    def project(self, pts):
        sub = self.inner.project(pts[:, self.dims])
        if sub is None:
            return None
        out = pts.copy()
        out[:, self.dims] = sub
        return out

    def to_spec(self):
        spec = self.inner.to_spec()
        spec["dims"] = list(self.dims)
        return spec


def _support_dims(constraint):
    """Coordinate indices a constraint can react to, or None for all."""
    if isinstance(constraint, Subspace):
        return constraint.dims
    if isinstance(constraint, AxisBound):
        return (constraint.axis,)
    return None


class Barrier:
    """Safety function h with h(x) >= 0 on the safe set, batch-evaluated.

    ``support`` optionally names the coordinate indices h depends on; it is
    used to decide whether a frozen-coordinate constraint is still fixable.
    """

    def __init__(self, value_fn, grad_fn, support=None):
        self._value = value_fn
        self._grad = grad_fn
        self.support = support

    def value(self, pts):
        return np.asarray(self._value(pts), dtype=float)

    def grad(self, pts):
        return np.asarray(self._grad(pts), dtype=float)

    @classmethod
    def from_constraint(cls, constraint):
        """h = -g: the safe set of a constraint g <= 0."""
        return cls(lambda p: -constraint.value(p), lambda p: -constraint.grad(p),
                   support=_support_dims(constraint))

    def saturate(self, cap):
        """Bounded variant cap * tanh(h / cap): same zero set and sign, and
        the same slope at the boundary, but far-away states stop dominating
        pairwise decay constraints."""
        if cap <= 0.0:
            raise ValueError("cap must be positive")

        def value(p):
            return cap * np.tanh(self.value(p) / cap)

        def grad(p):
            sech2 = 1.0 / np.cosh(self.value(p) / cap) ** 2
            return sech2[:, None] * self.grad(p)

        return Barrier(value, grad, support=self.support)


# ---------------------------------------------------------------------------
# Constraint groups over flattened vectors
# ---------------------------------------------------------------------------

def _split_states(x, n_states):
    n, d = x.shape
    if d % n_states != 0:
        raise ValueError(f"vector width {d} not divisible by {n_states} states")
    return x.reshape(n, n_states, d // n_states)


class PerStateGroup:
    """One point constraint broadcast over the states of a flattened vector.

    With ``n_states == 1`` this is a whole-vector constraint. The constraint
    may be a sequence of length n_states for time-varying geometry.
    """

    def __init__(self, constraint, n_states=1, smoothing="raw", activation_abar=0.0):
        if smoothing not in SMOOTHINGS:
            raise ValueError(f"unknown smoothing {smoothing!r}")
        self.n_states = int(n_states)
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if isinstance(constraint, (list, tuple)):
            if len(constraint) != self.n_states:
                raise ValueError("per-state constraint list must have one entry per state")
            self.constraints = list(constraint)
            self.constraint = None
        else:
            self.constraint = constraint
            self.constraints = None
        self.smoothing = smoothing
        self.activation_abar = float(activation_abar)

    @property
    def m(self):
        return self.n_states

    def _per_state(self, s):
        return self.constraint if self.constraint is not None else self.constraints[s]

    def raw_values(self, x):
        states = _split_states(x, self.n_states)
        n, s, sd = states.shape
        if self.constraint is not None:
            return self.constraint.value(states.reshape(n * s, sd)).reshape(n, s)
        out = np.empty((n, s))
        for j in range(s):
            out[:, j] = self.constraints[j].value(states[:, j, :])
        return out

    def add_weighted_grad(self, x, weights, out, *, raw=False):
        states = _split_states(x, self.n_states)
        n, s, sd = states.shape
        w = weights
        if not raw:
            w = w * smooth_deriv(self.raw_values(x), self.smoothing)
        out_states = out.reshape(n, s, sd)
        if self.constraint is not None:
            grads = self.constraint.grad(states.reshape(n * s, sd)).reshape(n, s, sd)
            out_states += w[:, :, None] * grads
        else:
            for j in range(s):
                out_states[:, j, :] += w[:, j, None] * self.constraints[j].grad(states[:, j, :])

    def project_sweep(self, x, free_mask, tol):
        states = _split_states(x, self.n_states)
        n, s, sd = states.shape
        mask_states = None if free_mask is None else free_mask.reshape(s, sd)
        for j in range(s):
            c = self._per_state(j)
            pts = states[:, j, :]
            if mask_states is None or mask_states[j].all():
                proj = c.project(pts)
                if proj is not None:
                    states[:, j, :] = proj
                    continue
                free = np.ones(sd, dtype=bool)
            else:
                free = mask_states[j]
                if not free.any():
                    continue
            _newton_correct(c, pts, free, tol)
        return x

    @property
    def has_closed_form(self):
        if self.constraint is not None:
            return _probes_closed(self.constraint)
        return all(_probes_closed(c) for c in self.constraints)

    def fixable_terms(self, free_mask):
        """Which scalar terms a masked projection can still repair."""
        if free_mask is None:
            return np.ones(self.m, dtype=bool)
        mask_states = free_mask.reshape(self.n_states, -1)
        out = np.empty(self.m, dtype=bool)
        for j in range(self.n_states):
            support = _support_dims(self._per_state(j))
            free = mask_states[j] if support is None else mask_states[j][list(support)]
            out[j] = bool(np.any(free))
        return out


def _probes_closed(constraint):
    # Custom constraints expose project_fn; built-ins always have closed forms.
    if isinstance(constraint, CustomConstraint):
        return constraint.project_fn is not None
    if isinstance(constraint, Subspace):
        return _probes_closed(constraint.inner)
    return isinstance(constraint, (Halfspace, BallInterior, BallExterior, AxisBound))


def _newton_correct(constraint, pts, free, tol, iters=4):
    """Push points toward g <= 0 along the masked gradient (in place).

    Corrections aim slightly inside the boundary so interleaved groups do
    not leave each other hovering just above the tolerance.
    """
    slack = 0.25 * tol
    for _ in range(iters):
        g = constraint.value(pts)
        viol = g > slack
        if not np.any(viol):
            return
        grad = constraint.grad(pts[viol])
        grad[:, ~free] = 0.0
        denom = np.sum(grad * grad, axis=1)
        ok = denom > 1e-18
        if not np.any(ok):
            return
        step = np.zeros_like(grad)
        step[ok] = grad[ok] * ((g[viol][ok] + slack) / denom[ok])[:, None]
        pts[viol] -= step


class DcbfGroup:
    """Pairwise barrier-decay constraints over consecutive trajectory states.

    Emits g_tau(x) = (1 - alpha) h(x_tau) - h(x_tau+1) <= 0 for
    tau = 0..n_states-2, so each scalar touches exactly two state blocks.
    ``barrier`` may be a list of per-state barriers for moving geometry.
    """

    def __init__(self, barrier, alpha, n_states, smoothing="raw", activation_abar=0.0):
        if smoothing not in SMOOTHINGS:
            raise ValueError(f"unknown smoothing {smoothing!r}")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        self.n_states = int(n_states)
        if self.n_states < 2:
            raise ValueError("pairwise constraints need at least 2 states")
        if isinstance(barrier, (list, tuple)):
            if len(barrier) != self.n_states:
                raise ValueError("per-state barrier list must have one entry per state")
            self.barriers = list(barrier)
            self.barrier = None
        else:
            self.barrier = barrier
            self.barriers = None
        self.alpha = float(alpha)
        self.smoothing = smoothing
        self.activation_abar = float(activation_abar)

    @property
    def m(self):
        return self.n_states - 1

    def _h_and_grad(self, states, want_grad):
        n, s, sd = states.shape
        if self.barrier is not None:
            flat = states.reshape(n * s, sd)
            h = self.barrier.value(flat).reshape(n, s)
            g = self.barrier.grad(flat).reshape(n, s, sd) if want_grad else None
            return h, g
        h = np.empty((n, s))
        g = np.empty((n, s, sd)) if want_grad else None
        for j in range(s):
            h[:, j] = self.barriers[j].value(states[:, j, :])
            if want_grad:
                g[:, j, :] = self.barriers[j].grad(states[:, j, :])
        return h, g

    def raw_values(self, x):
        states = _split_states(x, self.n_states)
        h, _ = self._h_and_grad(states, want_grad=False)
        return (1.0 - self.alpha) * h[:, :-1] - h[:, 1:]

    def add_weighted_grad(self, x, weights, out, *, raw=False):
        states = _split_states(x, self.n_states)
        n, s, sd = states.shape
        h, hg = self._h_and_grad(states, want_grad=True)
        w = weights
        if not raw:
            rawv = (1.0 - self.alpha) * h[:, :-1] - h[:, 1:]
            w = w * smooth_deriv(rawv, self.smoothing)
        out_states = out.reshape(n, s, sd)
        out_states[:, :-1, :] += (1.0 - self.alpha) * w[:, :, None] * hg[:, :-1, :]
        out_states[:, 1:, :] -= w[:, :, None] * hg[:, 1:, :]

    def project_sweep(self, x, free_mask, tol, inner_passes=8):
        states = _split_states(x, self.n_states)
        n, s, sd = states.shape
        mask_states = None if free_mask is None else free_mask.reshape(s, sd)
        one_m_a = 1.0 - self.alpha
        slack = 0.25 * tol
        # alternate parities so corrected pairs never share a state in one
        # pass; repeated passes relay corrections along the chain
        for _ in range(inner_passes):
            clean = True
            for parity in (0, 1):
                taus = np.arange(parity, s - 1, 2)
                if taus.size == 0:
                    continue
                h, hg = self._h_and_grad(states, want_grad=True)
                g = one_m_a * h[:, taus] - h[:, taus + 1]
                ga = one_m_a * hg[:, taus, :]
                gb = -hg[:, taus + 1, :]
                if mask_states is not None:
                    ga = ga * mask_states[taus][None, :, :]
                    gb = gb * mask_states[taus + 1][None, :, :]
                denom = np.sum(ga * ga, axis=2) + np.sum(gb * gb, axis=2)
                viol = (g > slack) & (denom > 1e-18)
                if not np.any(viol):
                    continue
                clean = False
                step = np.where(viol, (g + slack) / np.where(denom > 1e-18, denom, 1.0), 0.0)
                states[:, taus, :] -= step[:, :, None] * ga
                states[:, taus + 1, :] -= step[:, :, None] * gb
            if clean:
                break
        return x

    @property
    def has_closed_form(self):
        return False

    def _barrier_at(self, j):
        return self.barrier if self.barrier is not None else self.barriers[j]

    def fixable_terms(self, free_mask):
        if free_mask is None:
            return np.ones(self.m, dtype=bool)
        mask_states = free_mask.reshape(self.n_states, -1)

        def movable(j):
            support = self._barrier_at(j).support
            free = mask_states[j] if support is None else mask_states[j][list(support)]
            return bool(np.any(free))

        return np.array([movable(tau) or movable(tau + 1) for tau in range(self.m)])


# ---------------------------------------------------------------------------
# Constraint sets
# ---------------------------------------------------------------------------

class ConstraintSet:
    """Ordered stack of constraint groups over a flattened vector space.

    Scalar ordering is group-major, then state/pair index within the group.
    An optional per-coordinate affine map (mean, scale) lets the set evaluate
    constraints in original physical coordinates while the sampler works in
    normalized coordinates.
    """

    def __init__(self, groups=(), affine=None, grad_metric="chain"):
        self.groups = list(groups)
        self.affine = None
        if grad_metric not in ("chain", "physical"):
            raise ValueError(f"unknown grad_metric {grad_metric!r}")
        self.grad_metric = grad_metric
        if affine is not None:
            mean, scale = affine
            self.affine = (as_float_array(mean, ndim=1), as_float_array(scale, ndim=1))

    @classmethod
    def for_points(cls, constraints, smoothing="raw"):
        """Whole-vector constraints: each applies to the full point."""
        return cls([PerStateGroup(c, n_states=1, smoothing=smoothing) for c in constraints])

    @classmethod
    def for_trajectory(cls, constraints, n_states, smoothing="raw"):
        """Broadcast each point constraint over every state of a trajectory."""
        return cls([PerStateGroup(c, n_states=n_states, smoothing=smoothing) for c in constraints])

    def __or__(self, other):
        if self.affine is not None or other.affine is not None:
            raise ValueError("combine sets before attaching an affine map")
        return ConstraintSet(self.groups + other.groups)

    def with_affine(self, mean, scale, grad_metric="chain"):
        """Evaluate in physical coordinates x*scale + mean; project back exactly.

        ``grad_metric`` picks the gradient reported to multiplier methods:
        ``"chain"`` is the literal derivative in normalized coordinates
        (physical pushes damped by scale^2 on squashed dimensions);
        ``"physical"`` makes the resulting physical push proportional to the
        original-coordinate gradient instead.
        """
        return ConstraintSet(self.groups, affine=(mean, scale), grad_metric=grad_metric)

    @property
    def n_constraints(self):
        return sum(g.m for g in self.groups)

    def _prepare(self, x):
        x = as_float_array(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2:
            raise ValueError(f"expected a vector or matrix, got shape {x.shape}")
        if self.affine is not None:
            mean, scale = self.affine
            if x.shape[1] != mean.shape[0]:
                raise ValueError("affine stats do not match vector width")
            x = x * scale + mean
        return x, squeeze

    def _active(self, group, abar):
        return abar is None or abar >= group.activation_abar

    def any_active(self, abar):
        return any(self._active(g, abar) for g in self.groups)

    def raw_values(self, x, abar=None):
        """Unsmoothed g values, shape (m,) for a vector or (n, m) for a batch.

        ``abar`` reports the current noise level; groups whose activation
        threshold is not reached yet contribute zeros.
        """
        phys, squeeze = self._prepare(x)
        if not self.groups:
            out = np.zeros((phys.shape[0], 0))
        else:
            out = np.hstack([
                g.raw_values(phys) if self._active(g, abar)
                else np.zeros((phys.shape[0], g.m))
                for g in self.groups])
        return out[0] if squeeze else out

    def values(self, x, abar=None):
        """Smoothed g values per each group's smoothing tag."""
        phys, squeeze = self._prepare(x)
        cols = []
        for g in self.groups:
            if self._active(g, abar):
                cols.append(smooth_value(g.raw_values(phys), g.smoothing))
            else:
                cols.append(np.zeros((phys.shape[0], g.m)))
        out = np.hstack(cols) if cols else np.zeros((phys.shape[0], 0))
        return out[0] if squeeze else out

    def weighted_grad(self, x, weights, *, raw=False, abar=None):
        """Sum_j weights[..., j] * grad g~_j(x), shape matching x."""
        phys, squeeze = self._prepare(x)
        n, d = phys.shape
        w = as_float_array(weights)
        if w.ndim == 1:
            w = np.broadcast_to(w, (n, w.shape[0])).copy()
        if w.shape != (n, self.n_constraints):
            raise ValueError(f"weights shape {w.shape} != {(n, self.n_constraints)}")
        out = np.zeros((n, d))
        col = 0
        for g in self.groups:
            if self._active(g, abar):
                g.add_weighted_grad(phys, w[:, col:col + g.m], out, raw=raw)
            col += g.m
        if self.affine is not None:
            scale = self.affine[1]
            out *= scale if self.grad_metric == "chain" else 1.0 / scale
        return out[0] if squeeze else out

    def grads_dense(self, x, *, raw=False):
        """Full Jacobian of the (smoothed) constraint stack: (n, m, d) or (m, d)."""
        phys, squeeze = self._prepare(x)
        n, d = phys.shape
        m = self.n_constraints
        out = np.zeros((n, m, d))
        eye = np.eye(m)
        for j in range(m):
            col = np.zeros((n, d))
            c = 0
            for g in self.groups:
                w = np.broadcast_to(eye[j, c:c + g.m], (n, g.m)).copy()
                g.add_weighted_grad(phys, w, col, raw=raw)
                c += g.m
            out[:, j, :] = col
        if self.affine is not None:
            scale = self.affine[1]
            out *= scale if self.grad_metric == "chain" else 1.0 / scale
        return out[0] if squeeze else out

    def hinge_total(self, x):
        """Per-row total violation: sum_j max(0, g_j(x)) on raw values."""
        raw = self.raw_values(x)
        return np.sum(np.maximum(raw, 0.0), axis=-1)

    def max_raw(self, x):
        raw = self.raw_values(x)
        if raw.shape[-1] == 0:
            shape = raw.shape[:-1]
            return -np.inf if not shape else np.full(shape, -np.inf)
        return np.max(raw, axis=-1)

    # -- projection ---------------------------------------------------------

    def project(self, z, free_mask=None, tol=PROJECTION_TOL, max_sweeps=50):
        """Project a single point onto the feasible set (raw constraints)."""
        out = self.project_batch(np.asarray(z, dtype=float)[None, :],
                                 free_mask=free_mask, tol=tol, max_sweeps=max_sweeps)
        return out[0]

    def project_batch(self, z, free_mask=None, tol=PROJECTION_TOL, max_sweeps=50,
                      fallback_iters=300, abar=None):
        """Project each row of z to raw feasibility.

        Single closed-form groups project exactly; otherwise cyclic sweeps of
        per-group corrections run until feasible, falling back to penalty
        gradient descent on ||x - z||^2. Groups below their activation noise
        level are skipped. Raises InfeasibleProjection if the budget is
        exhausted, carrying the best iterate and residual.
        """
        z = as_float_array(z, ndim=2, name="z")
        groups = [g for g in self.groups if self._active(g, abar)]
        if not groups:
            return z.copy()
        mean = scale = None
        if self.affine is not None:
            mean, scale = self.affine
            phys = z * scale + mean
        else:
            phys = z.copy()
        mask = None
        if free_mask is not None:
            mask = np.asarray(free_mask, dtype=bool)
            if mask.shape != (phys.shape[1],):
                raise ValueError("free_mask must have one entry per coordinate")

        # frozen coordinates can make some terms unrepairable; only the
        # repairable ones participate in the feasibility check
        fixable = np.concatenate([g.fixable_terms(mask) for g in groups])
        anchor = phys.copy()
        x = phys
        for sweep in range(max_sweeps):
            for g in groups:
                x = g.project_sweep(x, mask, tol)
            resid = self._max_raw_phys(x, fixable, groups)
            if resid <= tol:
                break
        resid = self._max_raw_phys(x, fixable, groups)
        if resid > tol:
            x = self._penalty_descent(x, anchor, mask, tol, fallback_iters, fixable, groups)
            for _ in range(5):
                for g in groups:
                    x = g.project_sweep(x, mask, tol)
            resid = self._max_raw_phys(x, fixable, groups)
        if resid > tol:
            best = (x - mean) / scale if self.affine is not None else x
            raise InfeasibleProjection(best, resid)
        if self.affine is not None:
            return (x - mean) / scale
        return x

    def _max_raw_phys(self, phys, fixable=None, groups=None):
        groups = self.groups if groups is None else groups
        vals = np.hstack([g.raw_values(phys) for g in groups])
        if fixable is not None:
            vals = vals[:, fixable]
        return float(np.max(vals)) if vals.size else -np.inf

    def _penalty_descent(self, x, anchor, mask, tol, iters, fixable=None, groups=None):
        groups = self.groups if groups is None else groups
        x = x.copy()
        weight = 10.0
        for k in range(iters):
            vals = np.hstack([g.raw_values(x) for g in groups])
            if fixable is not None:
                vals = np.where(fixable[None, :], vals, -np.inf)
            hinge = np.maximum(vals, 0.0)
            if float(np.max(vals)) <= tol:
                break
            grad = 2.0 * (x - anchor)
            w = 2.0 * weight * hinge
            col = 0
            pen = np.zeros_like(x)
            for g in groups:
                g.add_weighted_grad(x, w[:, col:col + g.m], pen, raw=True)
                col += g.m
            grad += pen
            if mask is not None:
                grad[:, ~mask] = 0.0
            norms = np.linalg.norm(grad, axis=1, keepdims=True)
            norms = np.where(norms < 1e-12, 1.0, norms)
            step = 0.05 * max(0.5 ** (k // 50), 1e-3)
            x -= step * grad / norms
            if (k + 1) % 50 == 0:
                weight *= 4.0
        return x

    @property
    def has_single_closed_form(self):
        return len(self.groups) == 1 and self.groups[0].has_closed_form


# ---------------------------------------------------------------------------
# Discrete-barrier trajectory constraints
# ---------------------------------------------------------------------------

def dcbf_trajectory_constraints(barrier, alpha, n_states, smoothing="raw"):
    """Build the pairwise barrier-decay constraint set over a trajectory.

    Requires at least one transition (n_states >= 2); emits n_states - 1
    scalar constraints, each touching only two consecutive state blocks.
    """
    if n_states < 2:
        raise ValueError("need at least one transition (n_states >= 2)")
    return ConstraintSet([DcbfGroup(barrier, alpha, n_states, smoothing=smoothing)])


def dcbf_satisfied(barrier, alpha, trajectory, tol=1e-9):
    """Check h(x_tau+1) >= (1 - alpha) h(x_tau) along a (S, sd) trajectory.

    Returns (ok, residual) with residual = max_tau (1-alpha) h_tau - h_tau+1.
    """
    traj = as_float_array(trajectory, ndim=2, name="trajectory")
    if traj.shape[0] < 2:
        raise ValueError("trajectory must contain at least 2 states")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    h = barrier.value(traj)
    resid = float(np.max((1.0 - alpha) * h[:-1] - h[1:]))
    return resid <= tol, resid


# ---------------------------------------------------------------------------
# File formats and the barrier registry
# ---------------------------------------------------------------------------

def _point_constraint_from_spec(spec):
    kind = spec.get("type")
    if kind == "halfspace":
        c = Halfspace(spec["a"], spec["b"])
    elif kind == "ball_interior":
        c = BallInterior(spec["center"], spec["radius"])
    elif kind == "ball_exterior":
        c = BallExterior(spec["center"], spec["radius"])
    elif kind == "axis_bound":
        c = AxisBound(spec["axis"], spec["bound"], spec.get("side", "upper"))
    else:
        raise ValueError(f"unknown constraint type {kind!r}")
    if "dims" in spec:
        c = Subspace(c, spec["dims"])
    return c


def build_barrier(spec, n_states=None):
    """Instantiate a named barrier from the registry.

    Known names: ``point_distance`` (outside a disk), ``axis_bound``, and
    ``moving_obstacle`` (per-state disk centers; needs ``n_states``).
    """
    name = spec.get("barrier")
    dims = spec.get("dims")

    def wrap(c):
        return Barrier.from_constraint(Subspace(c, dims) if dims is not None else c)

    if name == "point_distance":
        return wrap(BallExterior(spec["center"], spec["radius"]))
    if name == "axis_bound":
        return wrap(AxisBound(spec["axis"], spec["bound"], spec.get("side", "upper")))
    if name == "moving_obstacle":
        centers = np.asarray(spec["centers"], dtype=float)
        if n_states is None:
            raise ValueError("moving_obstacle barriers need n_states context")
        if centers.shape[0] < n_states:
            pad = np.repeat(centers[-1:], n_states - centers.shape[0], axis=0)
            centers = np.vstack([centers, pad])
        return [wrap(BallExterior(c, spec["radius"])) for c in centers[:n_states]]
    raise ValueError(f"unknown barrier {name!r}")


def load_constraints(path, n_states=1):
    """Read a constraint description file into a ConstraintSet.

    The file is a JSON object with optional ``constraints`` (point constraints,
    broadcast per state when n_states > 1) and ``dcbf`` (barrier specs with an
    ``alpha``) lists.
    """
    record = json.loads(Path(path).read_text())
    groups = []
    for spec in record.get("constraints", []):
        smoothing = spec.get("smoothing", "raw")
        c = _point_constraint_from_spec(spec)
        groups.append(PerStateGroup(c, n_states=n_states, smoothing=smoothing))
    for spec in record.get("dcbf", []):
        barrier = build_barrier(spec, n_states=n_states)
        groups.append(DcbfGroup(barrier, spec.get("alpha", 0.3), n_states,
                                smoothing=spec.get("smoothing", "raw")))
    return ConstraintSet(groups)


def save_constraints(constraint_specs, path, dcbf_specs=()):
    """Write a constraint description file from plain spec dictionaries."""
    record = {"constraints": list(constraint_specs)}
    if dcbf_specs:
        record["dcbf"] = list(dcbf_specs)
    Path(path).write_text(json.dumps(record, indent=2))
