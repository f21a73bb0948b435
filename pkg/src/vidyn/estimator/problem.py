"""Normal-equation assembly, LM optimization, and marginalization.

Variables split into a dense block (robot states, 18 dof; keyframe
poses, 6 dof) and landmarks (3 dof each). Landmarks are eliminated by
Schur complement using their block-diagonal Hessian. Visual residuals
of one frame are linearized together (vectorized); all other factors go
through the generic linearize() protocol of factors.py.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import hat, quat_to_rot
from .factors import PriorFactor
from .window import (
    POSE_DOF,
    STATE_DOF,
    Keyframe,
    SlidingWindow,
    pose_boxminus,
    pose_boxplus,
    state_boxminus,
    state_boxplus,
)


class GaugeDeficiencyError(RuntimeError):
    """Raised when the problem has unconstrained gauge freedom."""


class DanglingVariableError(KeyError):
    """Raised when a factor references a variable outside the window."""


@dataclass
class LMSettings:
    max_iterations: int = 8
    lambda_init: float = 1e-6
    lambda_factor: float = 10.0
    update_tol: float = 1e-8
    cost_tol: float = 1e-6  # relative cost decrease considered converged
    max_inner: int = 6


@dataclass
class OptimizeReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


def _dof(key) -> int:
    return STATE_DOF if key[0] == "s" else POSE_DOF if key[0] == "kf" else 3


def huber_cost(norm_sq: float, delta: float) -> float:
    """Robust cost in whitened units for one 2-vector visual residual."""
    s = np.sqrt(norm_sq)
    if s <= delta:
        return norm_sq
    return 2.0 * delta * s - delta * delta


class FrameVisualBlock:
    """All reprojection residuals of one frame, linearized together."""

    def __init__(self, frame_key, lm_ids, pixels, camera, sigma_px, huber_delta):
        self.frame_key = frame_key
        self.lm_ids = list(lm_ids)
        self._lm_keys = [("lm", j) for j in self.lm_ids]
        self.pixels = np.asarray(pixels, dtype=float)
        self.camera = camera
        self.sigma_px = sigma_px
        self.huber_delta = huber_delta

    def keys(self):
        return [self.frame_key] + list(self._lm_keys)

    def _project(self, get_value):
        pose = get_value(self.frame_key)
        cam = self.camera
        lms = np.array([get_value(k) for k in self._lm_keys])
        R_wb = quat_to_rot(pose.q)
        d_body = (lms - pose.p) @ R_wb  # rows: landmark in body frame
        pc = d_body @ cam.R_BC  # rows: landmark in camera frame
        X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
        pix = np.column_stack([cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy])
        return R_wb, d_body, X, Y, Z, self.pixels - pix

    def cost_and_weights(self, get_value):
        """Robust cost and IRLS weights without forming Jacobians."""
        _, _, _, _, _, r = self._project(get_value)
        norms = np.sqrt(np.einsum("ni,ni->n", r, r)) / self.sigma_px
        scale = np.where(
            norms <= self.huber_delta, 1.0, self.huber_delta / np.maximum(norms, 1e-300)
        )
        w = scale / self.sigma_px**2
        n2 = norms * norms
        cost = float(
            np.sum(
                np.where(
                    norms <= self.huber_delta,
                    n2,
                    2.0 * self.huber_delta * norms - self.huber_delta**2,
                )
            )
        )
        return r, w, cost

    def linearize_block(self, get_value):
        cam = self.camera
        R_wb, d_body, X, Y, Z, r = self._project(get_value)
        R_wc = R_wb @ cam.R_BC

        n = len(self.lm_ids)
        d_pix_d_pc = np.zeros((n, 2, 3))
        d_pix_d_pc[:, 0, 0] = cam.fx / Z
        d_pix_d_pc[:, 0, 2] = -cam.fx * X / Z**2
        d_pix_d_pc[:, 1, 1] = cam.fy / Z
        d_pix_d_pc[:, 1, 2] = -cam.fy * Y / Z**2
        # landmark in camera frame: pc = R_wc^T (l - p); pose perturbation
        # q <- q Exp(dtheta) gives d pc/d dtheta = R_BC^T [d_body]x
        hats = np.zeros((n, 3, 3))
        hats[:, 0, 1] = -d_body[:, 2]
        hats[:, 0, 2] = d_body[:, 1]
        hats[:, 1, 0] = d_body[:, 2]
        hats[:, 1, 2] = -d_body[:, 0]
        hats[:, 2, 0] = -d_body[:, 1]
        hats[:, 2, 1] = d_body[:, 0]
        J_pose = np.zeros((n, 2, 6))
        J_pose[:, :, 0:3] = -(d_pix_d_pc @ R_wc.T)
        J_pose[:, :, 3:6] = (d_pix_d_pc @ cam.R_BC.T) @ hats
        J_lm = d_pix_d_pc @ R_wc.T
        # residual = z - h: factor Jacobians carry a minus sign
        J_pose = -J_pose
        J_lm = -J_lm

        norms = np.sqrt(np.einsum("ni,ni->n", r, r)) / self.sigma_px
        scale = np.where(
            norms <= self.huber_delta, 1.0, self.huber_delta / np.maximum(norms, 1e-300)
        )
        w = scale / self.sigma_px**2
        n2 = norms * norms
        cost = float(
            np.sum(
                np.where(
                    norms <= self.huber_delta,
                    n2,
                    2.0 * self.huber_delta * norms - self.huber_delta**2,
                )
            )
        )
        return r, J_pose, J_lm, w, cost


class Problem:
    """Indexed normal-equation system over one sliding window."""

    def __init__(self, window: SlidingWindow, factors: list):
        self.window = window
        self.factors = factors
        self.dense_keys = [("s", n.frame_id) for n in window.states] + [
            ("kf", k.frame_id) for k in window.keyframes
        ]
        self.offsets = {}
        off = 0
        for key in self.dense_keys:
            self.offsets[key] = off
            off += _dof(key)
        self.dense_dim = off
        self.lm_ids = sorted(window.landmarks.keys())
        self.lm_index = {j: i for i, j in enumerate(self.lm_ids)}
        for f in factors:
            for key in f.keys():
                if key[0] == "lm":
                    if key[1] not in self.lm_index:
                        raise DanglingVariableError(f"unknown landmark {key[1]}")
                elif key not in self.offsets:
                    raise DanglingVariableError(f"unknown variable {key}")

    def values(self) -> dict:
        vals = {}
        for node in self.window.states:
            vals[("s", node.frame_id)] = node.state.copy()
        for kf in self.window.keyframes:
            vals[("kf", kf.frame_id)] = Keyframe(
                kf.frame_id, kf.t, kf.p.copy(), kf.q.copy(), kf.observations
            )
        for j, lm in self.window.landmarks.items():
            vals[("lm", j)] = lm.copy()
        return vals

    def boxplus(self, vals: dict, delta_dense: np.ndarray, delta_lm: np.ndarray) -> dict:
        out = {}
        for key in self.dense_keys:
            sl = slice(self.offsets[key], self.offsets[key] + _dof(key))
            if key[0] == "s":
                out[key] = state_boxplus(vals[key], delta_dense[sl])
            else:
                kf = vals[key]
                p, q = pose_boxplus(kf.p, kf.q, delta_dense[sl])
                out[key] = Keyframe(kf.frame_id, kf.t, p, q, kf.observations)
        for j, i in self.lm_index.items():
            out[("lm", j)] = vals[("lm", j)] + delta_lm[3 * i : 3 * i + 3]
        return out

    def write_back(self, vals: dict):
        for node in self.window.states:
            node.state = vals[("s", node.frame_id)]
        for kf in self.window.keyframes:
            src = vals[("kf", kf.frame_id)]
            kf.p, kf.q = src.p, src.q
        for j in self.lm_ids:
            self.window.landmarks[j] = vals[("lm", j)]

    def assemble(self, vals: dict):
        """Cost and normal-equation blocks at the given values.

        Returns (cost, Hpp, gp, Hll (m,3,3), gl (m,3), Hpl (dense, 3m)).
        g is the gradient J^T W r, so the LM step solves H d = -g.
        """
        get = vals.__getitem__
        nd, m = self.dense_dim, len(self.lm_ids)
        Hpp = np.zeros((nd, nd))
        gp = np.zeros(nd)
        Hll = np.zeros((m, 3, 3))
        gl = np.zeros((m, 3))
        Hpl = np.zeros((nd, 3 * m))
        cost = 0.0

        for f in self.factors:
            if isinstance(f, FrameVisualBlock):
                r, J_pose, J_lm, w, c = f.linearize_block(get)
                cost += c
                key = f.frame_key
                o = self.offsets[key]
                d = 6  # visual residuals touch only the pose part
                n = len(f.lm_ids)
                Jpw = J_pose * w[:, None, None]  # weight is scalar per observation
                Jpw2 = Jpw.reshape(2 * n, 6)
                Hpp[o : o + d, o : o + d] += Jpw2.T @ J_pose.reshape(2 * n, 6)
                gp[o : o + d] += Jpw2.T @ r.reshape(2 * n)
                JpwT = Jpw.transpose(0, 2, 1)  # (n, 6, 2)
                JlwT = (J_lm * w[:, None, None]).transpose(0, 2, 1)  # (n, 3, 2)
                Hll_f = np.matmul(JlwT, J_lm)
                gl_f = np.matmul(JlwT, r[:, :, None])[:, :, 0]
                cross = np.matmul(JpwT, J_lm)
                li = np.fromiter(
                    (self.lm_index[j] for j in f.lm_ids), dtype=int, count=len(f.lm_ids)
                )
                # landmark ids are unique within one frame block
                Hll[li] += Hll_f
                gl[li] += gl_f
                Hpl3 = Hpl.reshape(nd, m, 3)
                view = Hpl3[o : o + d].transpose(1, 0, 2)  # (m, 6, 3) view
                view[li] += cross
            elif isinstance(f, PriorFactor):
                # unit weight; stack the key blocks into one wide Jacobian
                r = f.residual(get)
                cost += float(r @ r)
                J = np.zeros((r.size, nd))
                for key in f.keys():
                    o = self.offsets[key]
                    J[:, o : o + _dof(key)] = f.jacobians[key]
                Hpp += J.T @ J
                gp += J.T @ r
            else:
                r, jacs, W = f.linearize(get)
                Wr = W @ r
                cost += float(r @ Wr)
                items = list(jacs.items())
                for key_a, Ja in items:
                    oa = self.offsets[key_a]
                    da = _dof(key_a)
                    gp[oa : oa + da] += Ja.T @ Wr
                    for key_b, Jb in items:
                        ob = self.offsets[key_b]
                        db = _dof(key_b)
                        Hpp[oa : oa + da, ob : ob + db] += Ja.T @ W @ Jb
        return cost, Hpp, gp, Hll, gl, Hpl

    def cost_only(self, vals: dict) -> float:
        get = vals.__getitem__
        cost = 0.0
        for f in self.factors:
            if isinstance(f, FrameVisualBlock):
                cost += f.cost_and_weights(get)[2]
            elif isinstance(f, PriorFactor):
                r = f.residual(get)
                cost += float(r @ r)
            else:
                r, _, W = f.linearize(get)
                cost += float(r @ (W @ r))
        return cost


def build_problem(window: SlidingWindow, factors: list) -> Problem:
    """Index the window's variables against the factor list."""
    return Problem(window, factors)


def optimize(
    window: SlidingWindow, factors: list, settings: LMSettings | None = None
) -> OptimizeReport:
    """LM with Schur complement on landmarks; updates the window in place."""
    settings = settings or LMSettings()
    has_visual = any(isinstance(f, FrameVisualBlock) for f in factors)
    if window.prior is None and not has_visual:
        raise GaugeDeficiencyError(
            "problem has unconstrained global pose gauge: no prior and no visual factors"
        )
    prob = Problem(window, factors)
    vals = prob.values()
    cost = prob.cost_only(vals)
    initial_cost = cost
    lam = settings.lambda_init
    converged = False
    it = 0
    for it in range(1, settings.max_iterations + 1):
        _, Hpp, gp, Hll, gl, Hpl = prob.assemble(vals)
        accepted = False
        for _ in range(settings.max_inner):
            m = len(prob.lm_ids)
            damped = Hll + lam * np.eye(3)[None]
            try:
                Hll_inv = np.linalg.inv(damped)
            except np.linalg.LinAlgError:
                lam *= settings.lambda_factor
                continue
            if m:
                Hpl3 = Hpl.reshape(prob.dense_dim, m, 3).transpose(1, 0, 2)  # (m,nd,3)
                tmp = np.matmul(Hpl3, Hll_inv)  # (m, nd, 3)
                tmp2 = tmp.transpose(1, 0, 2).reshape(prob.dense_dim, 3 * m)
                S = Hpp + lam * np.eye(prob.dense_dim) - tmp2 @ Hpl.T
                rhs = -gp + tmp2 @ gl.reshape(-1)
            else:
                S = Hpp + lam * np.eye(prob.dense_dim)
                rhs = -gp
            try:
                dd = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                lam *= settings.lambda_factor
                continue
            if m:
                back = gl + Hpl.T.reshape(m, 3, prob.dense_dim) @ dd
                dl = -np.matmul(Hll_inv, back[:, :, None])[:, :, 0].reshape(-1)
            else:
                dl = np.zeros(0)
            cand = prob.boxplus(vals, dd, dl)
            cand_cost = prob.cost_only(cand)
            if cand_cost <= cost:
                decrease = cost - cand_cost
                vals, cost = cand, cand_cost
                lam = max(lam / settings.lambda_factor, 1e-12)
                step = np.linalg.norm(dd) + np.linalg.norm(dl)
                accepted = True
                break
            lam *= settings.lambda_factor
        if not accepted:
            break
        if step < settings.update_tol or decrease <= settings.cost_tol * max(cost, 1e-12):
            converged = True
            break
    prob.write_back(vals)
    return OptimizeReport(initial_cost, cost, it, converged)


_BOXMINUS = {
    "s": state_boxminus,
    "kf": lambda cur, lin: pose_boxminus(cur.p, cur.q, lin.p, lin.q),
    "lm": lambda cur, lin: cur - lin,
}


def _snapshot(key, value):
    if key[0] == "s":
        return value.copy()
    if key[0] == "kf":
        return Keyframe(value.frame_id, value.t, value.p.copy(), value.q.copy(), {})
    return np.array(value, dtype=float)


def _sqrt_weight(W: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD weight matrix."""
    W = 0.5 * (W + W.T)
    w, V = np.linalg.eigh(W)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def marginalize_frame_visual(
    vals: dict,
    prior: PriorFactor | None,
    blocks: list,
    pose_key,
    row_tol: float = 1e-10,
) -> PriorFactor | None:
    """Marginalize one frame pose plus a set of landmarks into a prior.

    blocks are FrameVisualBlock instances covering every observation of
    the landmarks being eliminated (their lm_ids). Each landmark appears
    in no other factor, so it is eliminated from its own observation
    rows by a small QR first; the pose is then eliminated from the
    stacked remainder plus the old prior by one final QR. Returns the
    new PriorFactor over the remaining variables (or None).
    """
    # column layout: pose first, kept frame keys after
    kept_keys: list = []
    for b in blocks:
        if b.frame_key != pose_key and b.frame_key not in kept_keys:
            kept_keys.append(b.frame_key)
    if prior is not None:
        for key in prior.keys():
            if key != pose_key and key not in kept_keys:
                kept_keys.append(key)
    offsets, off = {}, 6
    for key in kept_keys:
        offsets[key] = off
        off += _dof(key)
    offsets[pose_key] = 0
    n_cols = off
    get = vals.__getitem__

    per_lm: dict = {}
    for b in blocks:
        r, J_pose, J_lm, w, _ = b.linearize_block(get)
        sw = np.sqrt(w)
        o = offsets[b.frame_key]
        for a, j in enumerate(b.lm_ids):
            per_lm.setdefault(j, []).append(
                (o, sw[a] * J_pose[a], sw[a] * J_lm[a], sw[a] * r[a])
            )
    rows, rhs = [], []
    for j, obs in per_lm.items():
        if 2 * len(obs) <= 3:
            continue  # all information spent on the landmark itself
        # QR over the involved frames only, then scatter to full width
        frame_offs = sorted({o for o, _, _, _ in obs})
        col_of = {o: 3 + 6 * a for a, o in enumerate(frame_offs)}
        A = np.zeros((2 * len(obs), 3 + 6 * len(frame_offs)))
        bvec = np.empty(2 * len(obs))
        for a, (o, Jp, Jl, rr) in enumerate(obs):
            A[2 * a : 2 * a + 2, 0:3] = Jl
            c = col_of[o]
            A[2 * a : 2 * a + 2, c : c + 6] = Jp
            bvec[2 * a : 2 * a + 2] = rr
        Q, R = np.linalg.qr(A, mode="reduced")
        wide = np.zeros((R.shape[0] - 3, n_cols))
        for o in frame_offs:
            c = col_of[o]
            wide[:, o : o + 6] = R[3:, c : c + 6]
        rows.append(wide)
        rhs.append((Q.T @ bvec)[3:])
    if prior is not None:
        r0 = prior.r0
        A = np.zeros((r0.size, n_cols))
        for key in prior.keys():
            o = offsets[key]
            A[:, o : o + _dof(key)] = prior.jacobians[key]
            delta = prior._boxminus[key](get(key), prior.lin_points[key])
            r0 = r0 + prior.jacobians[key] @ delta
        rows.append(A)
        rhs.append(r0)
    if not rows:
        return None
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    Q, R = np.linalg.qr(A, mode="reduced")
    J_full = R[6:, 6:]
    r0 = (Q.T @ b)[6:]
    keep_rows = np.linalg.norm(J_full, axis=1) > row_tol * max(np.linalg.norm(A), 1.0)
    J_full, r0 = J_full[keep_rows], r0[keep_rows]
    if J_full.shape[0] == 0:
        return None
    prior_keys, jacobians, lin_points, boxminus = [], {}, {}, {}
    for key in kept_keys:
        o = offsets[key] - 6
        block = J_full[:, o : o + _dof(key)]
        if not np.any(block):
            continue
        prior_keys.append(key)
        jacobians[key] = block
        lin_points[key] = _snapshot(key, vals[key])
        boxminus[key] = _BOXMINUS[key[0]]
    if not prior_keys:
        return None
    return PriorFactor(prior_keys, lin_points, jacobians, r0, boxminus)


def marginalize(
    vals: dict,
    factors: list,
    leaving: dict,
    row_tol: float = 1e-10,
) -> PriorFactor | None:
    """Marginalize variables out of the given factors via QR.

    vals maps variable keys to current values; factors are exactly the
    factors to absorb (they must be removed from the active problem by
    the caller). leaving maps each leaving key to a boolean mask over
    its tangent dof (True = marginalize that dof), enabling partial
    marginalization such as keeping a demoted state's pose.

    The whitened residuals/Jacobians are stacked and the leaving
    columns eliminated by orthogonal transformation (square-root form):
    with weights spanning many orders of magnitude, forming the Schur
    complement of the information matrix directly would lose the weakly
    constrained directions to cancellation. Returns a linearized
    PriorFactor over the remaining connected dof, or None if nothing
    remains.
    """
    if not factors:
        return None
    # column layout: leaving dof first, kept dof after
    keys = []
    for f in factors:
        for key in f.keys():
            if key not in keys:
                keys.append(key)
    kept_cols, gone_cols = {}, {}
    n_kept = n_gone = 0
    for key in keys:
        dof = _dof(key)
        mask = np.asarray(leaving.get(key, np.zeros(dof, dtype=bool)), dtype=bool)
        kept_cols[key] = (n_kept, ~mask)
        gone_cols[key] = (n_gone, mask)
        n_kept += int((~mask).sum())
        n_gone += int(mask.sum())
    if n_gone == 0:
        raise ValueError("no leaving dof specified")

    def cols_of(key):
        dof = _dof(key)
        idx = np.empty(dof, dtype=int)
        start_k, keep_mask = kept_cols[key]
        start_g, gone_mask = gone_cols[key]
        idx[gone_mask] = start_g + np.arange(gone_mask.sum())
        idx[keep_mask] = n_gone + start_k + np.arange(keep_mask.sum())
        return idx

    get = vals.__getitem__
    blocks, rhs = [], []
    for f in factors:
        if isinstance(f, FrameVisualBlock):
            raise ValueError("visual blocks are dropped, not marginalized")
        r, jacs, W = f.linearize(get)
        sw = _sqrt_weight(W)
        row = np.zeros((r.size, n_gone + n_kept))
        for key, J in jacs.items():
            row[:, cols_of(key)] += sw @ J
        blocks.append(row)
        rhs.append(sw @ r)
    A = np.vstack(blocks)
    b = np.concatenate(rhs)
    if n_kept == 0:
        return None

    Q, R = np.linalg.qr(A, mode="reduced")
    qtb = Q.T @ b
    # rows past the leaving block hold the marginal square-root system
    J_full = R[n_gone:, n_gone:]
    r0 = qtb[n_gone:]
    keep_rows = np.linalg.norm(J_full, axis=1) > row_tol * max(
        np.linalg.norm(A), 1.0
    )
    J_full, r0 = J_full[keep_rows], r0[keep_rows]
    if J_full.shape[0] == 0:
        return None

    prior_keys, jacobians, lin_points, boxminus = [], {}, {}, {}
    for key in keys:
        start_k, keep_mask = kept_cols[key]
        if not keep_mask.any():
            continue
        dof = _dof(key)
        block = np.zeros((J_full.shape[0], dof))
        block[:, keep_mask] = J_full[:, start_k : start_k + int(keep_mask.sum())]
        if not np.any(block):
            continue
        prior_keys.append(key)
        jacobians[key] = block
        lin_points[key] = _snapshot(key, vals[key])
        boxminus[key] = _BOXMINUS[key[0]]
    if not prior_keys:
        return None
    return PriorFactor(prior_keys, lin_points, jacobians, r0, boxminus)
