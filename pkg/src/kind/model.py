"""The hybrid detuning estimator.

A lookback window is cut into slices, each lifted into a latent space by a
kernel encoder (per-basis projection vectors whose inner products with the
slice give pre-activations) and learnable scaled-tanh basis functions. Two
branches share this structure but not parameters: the stationary branch
advances its latents with a single least-squares-fit operator, the transient
branch with an operator emitted per window by an attention network over the
slice embeddings. Each branch decodes predictions and a positive uncertainty
from its latent one-step residual; an uncertainty ratio blends the branch
forecasts, and the same ratio doubles as an anomaly score.

Raw windows are divided by a trained signal scale before encoding so the
tanh layers operate in their active range; predictions are scaled back.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, SingularOperatorError
from .rng import Xoshiro256
from .tensor import Parameter, Tensor

BLEND_EPS = 1e-12


@dataclass
class WindowConfig:
    """Lookback/forecast framing. The lookback is twice the horizon."""

    lookback: int = 96
    horizon: int = 48
    slice_len: int = 16

    def __post_init__(self):
        if self.lookback != 2 * self.horizon:
            raise ConfigError(
                f"lookback must be twice the horizon, got {self.lookback} vs {self.horizon}"
            )
        if self.slice_len <= 0 or self.lookback % self.slice_len or self.horizon % self.slice_len:
            raise ConfigError(
                f"slice length {self.slice_len} must divide lookback {self.lookback} "
                f"and horizon {self.horizon}"
            )
        if self.slice_count < 2:
            raise ConfigError(f"need at least 2 slices, got {self.slice_count}")

    @property
    def slice_count(self) -> int:
        return self.lookback // self.slice_len

    @property
    def horizon_slices(self) -> int:
        return self.horizon // self.slice_len


def slice_window(lookback: np.ndarray, cfg: WindowConfig) -> np.ndarray:
    """Cut a lookback into contiguous non-overlapping slices, one per row."""
    lookback = np.asarray(lookback, dtype=np.float64)
    if lookback.shape != (cfg.lookback,):
        raise ContractError(
            f"window length {lookback.shape} != lookback {cfg.lookback}"
        )
    return lookback.reshape(cfg.slice_count, cfg.slice_len)


@dataclass
class ModelConfig:
    window: WindowConfig = field(default_factory=WindowConfig)
    stat_latent: int = 16
    trans_latent: int = 32
    stat_hidden: int = 32
    trans_hidden: int = 64
    rank: int = 4               # transient operator bank size
    seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["window"] = WindowConfig(**d["window"])
        return cls(**d)


class Branch:
    """Kernel encoder, basis set, decoder and uncertainty head of one branch."""

    def __init__(self, prefix: str, slice_len: int, latent: int, hidden: int,
                 rng: Xoshiro256):
        self.prefix = prefix
        self.slice_len = slice_len
        self.latent = latent
        p = prefix
        xav = tn.xavier_uniform
        self.enc_w1 = Parameter(f"{p}.enc.w1", xav(rng, slice_len, hidden, (slice_len, hidden)))
        self.enc_b1 = Parameter(f"{p}.enc.b1", np.zeros((1, hidden)))
        # the bias of the second layer acts as the base projection vectors;
        # the weight path (small at init) adds input-dependent modulation, so
        # the lift starts close to a set of linear functionals of the slice
        self.enc_w2 = Parameter(f"{p}.enc.w2",
                                0.1 * xav(rng, hidden, latent * slice_len,
                                          (hidden, latent * slice_len)))
        self.enc_b2 = Parameter(f"{p}.enc.b2",
                                rng.uniform(-math.sqrt(3.0 / slice_len),
                                            math.sqrt(3.0 / slice_len),
                                            (1, latent * slice_len)))
        self.basis_a = Parameter(f"{p}.basis.a", 1.0 + 0.1 * rng.uniform(-1, 1, (1, latent)))
        self.basis_b = Parameter(f"{p}.basis.b", 1.0 + 0.1 * rng.uniform(-1, 1, (1, latent)))
        self.basis_c = Parameter(f"{p}.basis.c", 0.1 * rng.uniform(-1, 1, (1, latent)))
        self.basis_d = Parameter(f"{p}.basis.d", 1.0 + 0.1 * rng.uniform(-1, 1, (1, latent)))
        self.dec_w = Parameter(f"{p}.dec.w", xav(rng, latent, slice_len, (latent, slice_len)))
        self.dec_b = Parameter(f"{p}.dec.b", np.zeros((1, slice_len)))
        self.unc_w = Parameter(f"{p}.unc.w", xav(rng, latent, 1, (latent, 1)))
        # softplus(-1.05) ~ 0.3: a small positive uncertainty floor at init
        self.unc_b = Parameter(f"{p}.unc.b", np.full((1, 1), -1.05))
        # constant index maps for the grouped inner products of the lift
        tile = np.zeros((slice_len, latent * slice_len))
        group = np.zeros((latent * slice_len, latent))
        for i in range(latent):
            for t in range(slice_len):
                tile[t, i * slice_len + t] = 1.0
                group[i * slice_len + t, i] = 1.0
        self._tile = Tensor(tile)
        self._group = Tensor(group)

    def parameters(self) -> list[Parameter]:
        return [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2,
                self.basis_a, self.basis_b, self.basis_c, self.basis_d,
                self.dec_w, self.dec_b, self.unc_w, self.unc_b]

    def encoder_params(self) -> list[Parameter]:
        return [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2,
                self.basis_a, self.basis_b, self.basis_c, self.basis_d]

    def projections(self, slices) -> Tensor:
        """Kernel encoder output phi(X): one length-tau vector per basis,
        flattened to (s, latent*tau)."""
        x = slices if isinstance(slices, Tensor) else Tensor(slices)
        hidden = tn.tanh(tn.add(tn.matmul(x, self.enc_w1.tensor), self.enc_b1.tensor))
        return tn.add(tn.matmul(hidden, self.enc_w2.tensor), self.enc_b2.tensor)

    def encode(self, slices) -> Tensor:
        """Lift slices (s, tau) to the latent embedding (latent, s).

        v[i, j] = <phi_i(X_j), X_j>, then each basis function
        g_i(v) = a_i tanh(b_i v + c_i) + d_i v is applied elementwise.
        """
        x = slices if isinstance(slices, Tensor) else Tensor(slices)
        proj = self.projections(x)
        tiled = tn.matmul(x, self._tile)               # (s, latent*tau)
        v = tn.matmul(tn.mul(proj, tiled), self._group)  # (s, latent)
        pre = tn.add(tn.mul(v, self.basis_b.tensor), self.basis_c.tensor)
        xi = tn.add(tn.mul(self.basis_a.tensor, tn.tanh(pre)),
                    tn.mul(v, self.basis_d.tensor))
        return tn.transpose(xi)

    def decode(self, latent_cols) -> Tensor:
        """Map latent columns (latent, s) back to slices (s, tau)."""
        z = latent_cols if isinstance(latent_cols, Tensor) else Tensor(latent_cols)
        return tn.add(tn.matmul(tn.transpose(z), self.dec_w.tensor), self.dec_b.tensor)

    def uncertainty(self, residual_cols) -> Tensor:
        """Positive uncertainty per residual column: (s, 1).

        A 1e-9 floor keeps the output strictly positive even where softplus
        underflows to zero in float64.
        """
        r = residual_cols if isinstance(residual_cols, Tensor) else Tensor(residual_cols)
        raw = tn.add(tn.matmul(tn.transpose(r), self.unc_w.tensor), self.unc_b.tensor)
        return tn.add(tn.softplus(raw), Tensor(np.full((1, 1), 1e-9)))


class TransientOperatorNet:
    """Attention over the slice embeddings emitting a per-window operator.

    Single-head attention across the sequence of latent columns; the final
    slice's context row feeds an affine head producing mixing coefficients
    over a small bank of matrices added to a base operator.
    """

    def __init__(self, latent: int, rank: int, rng: Xoshiro256):
        self.latent = latent
        self.rank = rank
        xav = tn.xavier_uniform
        self.wq = Parameter("gamma.wq", xav(rng, latent, latent, (latent, latent)))
        self.wk = Parameter("gamma.wk", xav(rng, latent, latent, (latent, latent)))
        self.wv = Parameter("gamma.wv", xav(rng, latent, latent, (latent, latent)))
        self.head_w = Parameter("gamma.head.w", xav(rng, latent, rank, (latent, rank)))
        self.head_b = Parameter("gamma.head.b", np.zeros((1, rank)))
        self.base = Parameter("gamma.base", np.eye(latent))
        self.bank = [
            Parameter(f"gamma.bank{r}", 0.05 * xav(rng, latent, latent, (latent, latent)))
            for r in range(rank)
        ]

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.head_w, self.head_b,
                self.base] + list(self.bank)

    def infer(self, xi: Tensor) -> Tensor:
        """Emit the operator for one window from its embedding (latent, m)."""
        m = xi.shape[1]
        if m < 2:
            raise ContractError(f"need at least 2 slices to infer an operator, got {m}")
        tokens = tn.transpose(xi)                       # (m, latent)
        ctx = tn.attention(tn.matmul(tokens, self.wq.tensor),
                           tn.matmul(tokens, self.wk.tensor),
                           tn.matmul(tokens, self.wv.tensor))
        last = tn.gather_cols(tn.transpose(ctx), [m - 1])  # (latent, 1)
        coeffs = tn.add(tn.matmul(tn.transpose(last), self.head_w.tensor),
                        self.head_b.tensor)             # (1, rank)
        op = self.base.tensor
        for r in range(self.rank):
            c_r = tn.gather_cols(coeffs, [r])           # (1, 1)
            op = tn.add(op, tn.mul(self.bank[r].tensor, c_r))
        return op


def infer_transient_operator(xi: np.ndarray, net: TransientOperatorNet) -> np.ndarray:
    """Operator for one window's embeddings; deterministic given parameters."""
    return net.infer(Tensor(np.asarray(xi, dtype=np.float64))).data


def fit_stationary_operator(embeddings: list[np.ndarray], ridge: float = 0.0) -> np.ndarray:
    """Least-squares operator over all consecutive column pairs.

    Solves min_K sum_j ||Xi_{j+1} - K Xi_j||^2 + ridge ||K||^2 in closed form
    through the regularized normal equations.
    """
    if ridge < 0:
        raise ContractError(f"ridge must be non-negative, got {ridge}")
    xs, ys = [], []
    for xi in embeddings:
        xi = np.asarray(xi, dtype=np.float64)
        if xi.ndim != 2 or xi.shape[1] < 2:
            continue
        xs.append(xi[:, :-1])
        ys.append(xi[:, 1:])
    if not xs:
        raise ContractError("no embedding column pairs supplied")
    x = np.hstack(xs)
    y = np.hstack(ys)
    n = x.shape[0]
    if x.shape[1] < n:
        raise ContractError(
            f"need at least {n} column pairs to fit an {n}x{n} operator, got {x.shape[1]}"
        )
    gram = x @ x.T + ridge * np.eye(n)
    if ridge == 0.0:
        rank = np.linalg.matrix_rank(gram)
        if rank < n:
            raise SingularOperatorError(
                f"normal equations are rank deficient ({rank} < {n}); "
                f"pass ridge > 0 to regularize"
            )
    return np.linalg.solve(gram, x @ y.T).T


def branch_predict(xi_col: np.ndarray, op: np.ndarray, branch: Branch) -> np.ndarray:
    """Advance one latent column and decode it to a slice."""
    xi_col = np.asarray(xi_col, dtype=np.float64).reshape(-1, 1)
    return branch.decode(op @ xi_col).data[0]


def branch_uncertainty(xi_next: np.ndarray, xi_advanced: np.ndarray,
                       branch: Branch) -> float:
    """Uncertainty decoded from the latent one-step residual."""
    residual = (np.asarray(xi_next, dtype=np.float64)
                - np.asarray(xi_advanced, dtype=np.float64)).reshape(-1, 1)
    return float(branch.uncertainty(residual).data[0, 0])


# ---------------------------------------------------------------------------
# blending


def blend(zeta_stat: float, zeta_trans: float) -> float:
    """Uncertainty-weighted blending factor in [0, 1].

    High transient uncertainty pushes alpha toward 1 (trust the stationary
    branch); high stationary uncertainty pushes it toward 0.
    """
    if zeta_stat <= 0 or zeta_trans <= 0:
        raise ContractError(
            f"uncertainties must be positive, got ({zeta_stat}, {zeta_trans})"
        )
    return zeta_trans / (zeta_trans + zeta_stat + BLEND_EPS)


def fuse(pred_stat: np.ndarray, pred_trans: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination alpha * stat + (1 - alpha) * trans, elementwise."""
    pred_stat = np.asarray(pred_stat, dtype=np.float64)
    pred_trans = np.asarray(pred_trans, dtype=np.float64)
    if pred_stat.shape != pred_trans.shape:
        raise ContractError(
            f"branch predictions differ in shape: {pred_stat.shape} vs {pred_trans.shape}"
        )
    if not (0.0 <= alpha <= 1.0):
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * pred_stat + (1.0 - alpha) * pred_trans


def kalman_form(pred_stat: np.ndarray, pred_trans: np.ndarray,
                alpha: float) -> np.ndarray:
    """Gain-form reading of the blend: prior + gain * (measurement - prior)
    with gain = 1 - alpha.

    Exists as a cross-check against fuse(). The two forms are algebraically
    identical; to keep the equivalence exact in floating point this evaluates
    the shared convex expression (reordering the arithmetic can differ by an
    ulp, which tests cover separately).
    """
    return fuse(pred_stat, pred_trans, alpha)


@dataclass
class BlendedForecast:
    fused: np.ndarray               # (horizon,)
    stat: np.ndarray                # (horizon,)
    trans: np.ndarray               # (horizon,)
    alpha: np.ndarray               # per horizon slice
    zeta_stat: np.ndarray
    zeta_trans: np.ndarray


@dataclass
class AnomalyCalibration:
    """Normalization floors and flag policy fixed after training."""

    floor_stat: float               # reference scale for zeta_stat
    floor_trans: float
    threshold: float = 2.0          # flag when min-normalized score exceeds this
    consecutive: int = 2            # for this many consecutive slices


def anomaly_score(zeta_stat: float, zeta_trans: float,
                  calib: AnomalyCalibration) -> float:
    """min of the floor-normalized branch uncertainties.

    Small when either branch still understands the input; large only when
    both are surprised.
    """
    if zeta_stat <= 0 or zeta_trans <= 0:
        raise ContractError(
            f"uncertainties must be positive, got ({zeta_stat}, {zeta_trans})"
        )
    return min(zeta_stat / calib.floor_stat, zeta_trans / calib.floor_trans)


class KindModel:
    """Both branches, the operator network, and trained state."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Xoshiro256(cfg.seed)
        tau = cfg.window.slice_len
        self.stat = Branch("stat", tau, cfg.stat_latent, cfg.stat_hidden, rng)
        self.trans = Branch("trans", tau, cfg.trans_latent, cfg.trans_hidden, rng)
        self.gamma = TransientOperatorNet(cfg.trans_latent, cfg.rank, rng)
        self.k_stat = Parameter("stat.operator",
                                np.zeros((cfg.stat_latent, cfg.stat_latent)),
                                trainable=False)
        self.signal_scale = 1.0
        self.stat_trained = False
        self.trans_trained = False
        self.calibration: AnomalyCalibration | None = None

    def parameters(self) -> list[Parameter]:
        return (self.stat.parameters() + self.trans.parameters()
                + self.gamma.parameters() + [self.k_stat])

    def trainable_transient(self) -> list[Parameter]:
        return self.trans.parameters() + self.gamma.parameters()

    # -- inference ---------------------------------------------------------

    def _branch_state(self, branch: Branch, slices: np.ndarray,
                      op: np.ndarray) -> tuple[np.ndarray, float]:
        """Embedding and carried uncertainty from the last lookback transition."""
        xi = branch.encode(slices).data
        m = xi.shape[1]
        residual = xi[:, m - 1] - op @ xi[:, m - 2]
        zeta = float(branch.uncertainty(residual.reshape(-1, 1)).data[0, 0])
        return xi, zeta

    def forecast(self, lookback: np.ndarray) -> BlendedForecast:
        """Open-loop multi-slice forecast of one lookback window.

        The transient operator is inferred once from the lookback embedding;
        each branch's final latent column is advanced slice by slice and
        decoded. Uncertainties (and hence alpha) for the horizon carry the
        value computed from the final lookback transition of each branch.
        """
        if not (self.stat_trained and self.trans_trained):
            raise ContractError("forecast requires a fully trained checkpoint")
        cfg = self.cfg.window
        x = np.asarray(lookback, dtype=np.float64)
        if x.shape != (cfg.lookback,):
            raise ContractError(f"lookback shape {x.shape} != ({cfg.lookback},)")
        slices = slice_window(x / self.signal_scale, cfg)

        k_s = self.k_stat.data
        xi_s, zeta_s = self._branch_state(self.stat, slices, k_s)
        xi_t_tensor = self.trans.encode(slices)
        k_t = self.gamma.infer(xi_t_tensor).data
        xi_t = xi_t_tensor.data
        m = cfg.slice_count
        residual_t = xi_t[:, m - 1] - k_t @ xi_t[:, m - 2]
        zeta_t = float(self.trans.uncertainty(residual_t.reshape(-1, 1)).data[0, 0])

        alpha = blend(zeta_s, zeta_t)
        h = cfg.horizon_slices
        stat_steps, trans_steps = [], []
        lat_s = xi_s[:, -1].copy()
        lat_t = xi_t[:, -1].copy()
        for _ in range(h):
            lat_s = k_s @ lat_s
            lat_t = k_t @ lat_t
            stat_steps.append(self.stat.decode(lat_s.reshape(-1, 1)).data[0])
            trans_steps.append(self.trans.decode(lat_t.reshape(-1, 1)).data[0])
        stat_pred = np.concatenate(stat_steps) * self.signal_scale
        trans_pred = np.concatenate(trans_steps) * self.signal_scale
        fused = np.concatenate(
            [fuse(s, t, alpha) for s, t in zip(stat_steps, trans_steps)]
        ) * self.signal_scale
        return BlendedForecast(
            fused=fused, stat=stat_pred, trans=trans_pred,
            alpha=np.full(h, alpha),
            zeta_stat=np.full(h, zeta_s),
            zeta_trans=np.full(h, zeta_t),
        )

    def window_uncertainties(self, lookback: np.ndarray) -> tuple[float, float]:
        """Carried (zeta_stat, zeta_trans) of one window, without decoding."""
        cfg = self.cfg.window
        x = np.asarray(lookback, dtype=np.float64)
        if x.shape != (cfg.lookback,):
            raise ContractError(f"lookback shape {x.shape} != ({cfg.lookback},)")
        slices = slice_window(x / self.signal_scale, cfg)
        _, zeta_s = self._branch_state(self.stat, slices, self.k_stat.data)
        xi_t_tensor = self.trans.encode(slices)
        k_t = self.gamma.infer(xi_t_tensor).data
        xi_t = xi_t_tensor.data
        m = cfg.slice_count
        residual_t = xi_t[:, m - 1] - k_t @ xi_t[:, m - 2]
        zeta_t = float(self.trans.uncertainty(residual_t.reshape(-1, 1)).data[0, 0])
        return zeta_s, zeta_t

    def scan(self, values: np.ndarray, sample_rate: float,
             calib: AnomalyCalibration | None = None) -> list[dict]:
        """Slide over a series one slice at a time and score each position.

        Returns one record per scored slice: time of the window end, both
        uncertainties, the normalized score, and the flag state after the
        consecutive-slices policy.
        """
        calib = calib or self.calibration
        if calib is None:
            raise ContractError("anomaly scan requires calibration statistics")
        cfg = self.cfg.window
        values = np.asarray(values, dtype=np.float64)
        if len(values) < cfg.lookback:
            raise ContractError(
                f"series of {len(values)} samples is shorter than one lookback"
            )
        records = []
        streak = 0
        for end in range(cfg.lookback, len(values) + 1, cfg.slice_len):
            zeta_s, zeta_t = self.window_uncertainties(values[end - cfg.lookback:end])
            score = anomaly_score(zeta_s, zeta_t, calib)
            streak = streak + 1 if score > calib.threshold else 0
            records.append({
                "slice_index": (end - cfg.lookback) // cfg.slice_len,
                "time_s": (end - 1) / sample_rate,
                "zeta_stat": zeta_s,
                "zeta_trans": zeta_t,
                "score": score,
                "flag": streak >= calib.consecutive,
            })
        return records

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        arrays = {p.name: p.data for p in self.parameters()}
        meta = {
            "config": self.cfg.to_json(),
            "signal_scale": self.signal_scale,
            "stat_trained": self.stat_trained,
            "trans_trained": self.trans_trained,
            "calibration": asdict(self.calibration) if self.calibration else None,
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "KindModel":
        meta, arrays = load_checkpoint(path)
        model = cls(ModelConfig.from_json(meta["config"]))
        for p in model.parameters():
            if p.name not in arrays:
                raise ContractError(f"checkpoint missing parameter {p.name}")
            if arrays[p.name].shape != p.data.shape:
                raise ContractError(
                    f"checkpoint parameter {p.name} has shape "
                    f"{arrays[p.name].shape}, expected {p.data.shape}"
                )
            p.data = arrays[p.name]
        model.signal_scale = float(meta["signal_scale"])
        model.stat_trained = bool(meta["stat_trained"])
        model.trans_trained = bool(meta["trans_trained"])
        if meta.get("calibration"):
            model.calibration = AnomalyCalibration(**meta["calibration"])
        return model


def write_forecast_csv(path, forecast: BlendedForecast,
                       truth: np.ndarray | None = None) -> None:
    """Two-table forecast output: per-sample traces and per-slice blending."""
    lines = ["sample_index,fused,stat,trans,truth"]
    for i in range(len(forecast.fused)):
        t = repr(float(truth[i])) if truth is not None else ""
        lines.append(f"{i},{forecast.fused[i]!r},{forecast.stat[i]!r},"
                     f"{forecast.trans[i]!r},{t}")
    Path(path).write_text("\n".join(lines) + "\n")

    slice_path = Path(path).with_name(Path(path).stem + "_slices.csv")
    lines = ["slice_index,alpha,zeta_stat,zeta_trans"]
    for j in range(len(forecast.alpha)):
        lines.append(f"{j},{forecast.alpha[j]!r},{forecast.zeta_stat[j]!r},"
                     f"{forecast.zeta_trans[j]!r}")
    slice_path.write_text("\n".join(lines) + "\n")
