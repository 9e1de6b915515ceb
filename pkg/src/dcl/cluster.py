"""Phase 2: information-maximizing cluster heads over extracted features.

A shared two-layer ReLU trunk feeds C softmax heads (some over-clustered).
Each head minimizes

    1/2 * consistency-to-adversarial-view + 1/2 * consistency-to-dropout-view
    + lam * ( max(KL(mean prediction || uniform) - delta, 0) + mean row entropy )

and the bank loss is the head average. The adversarial view perturbs each
feature row by a two-round procedure: a random unit direction scaled by
alpha_r * ||m_i||, then the normalized KL gradient scaled by
alpha_adv * ||m_i||. Consistency targets are constants during
backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_EPS, Tensor, Tape
from .nn import Activation, Dense, ForwardCtx, Sequential
from .optim import Adam

_CTX = ForwardCtx(training=False)
_GRAD_FLOOR = 1e-12


@dataclass(frozen=True)
class ClusterHead:
    k: int
    delta: float
    role: str = "primary"  # "primary" | "overcluster"

    def validate(self):
        if self.k < 2:
            raise ValueError(f"head needs k >= 2 outputs, got {self.k}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.role not in ("primary", "overcluster"):
            raise ValueError(f"unknown head role {self.role!r}")
        return self


@dataclass(frozen=True)
class PerturbSpec:
    alpha_r: float = 0.3
    alpha_adv: float = 0.15
    replicas: int = 5
    squared_norm: bool = False  # read ||m_i|| as a squared norm instead of L2

    def validate(self):
        if self.alpha_r <= 0 or self.alpha_adv <= 0:
            raise ValueError("perturbation scales must be positive")
        if self.replicas < 1:
            raise ValueError(f"replica count must be >= 1, got {self.replicas}")
        return self


@dataclass
class HeadTerms:
    r_sat: float
    l_d: float
    kl_unclamped: float
    kl_clamped: float
    cond_entropy: float
    total: float
    role: str
    k: int

    def as_dict(self):
        return {
            "r_sat": self.r_sat,
            "l_d": self.l_d,
            "kl": self.kl_clamped,
            "kl_unclamped": self.kl_unclamped,
            "cond_entropy": self.cond_entropy,
            "total": self.total,
            "role": self.role,
            "k": self.k,
        }


@dataclass
class LossBreakdown:
    heads: list
    bank_total: float


class ClusterBank:
    """Shared trunk plus one linear softmax head per ClusterHead."""

    def __init__(self, in_dim, hidden, heads, rng, init_std=1e-2, dtype=np.float32):
        heads = [h.validate() for h in heads]
        if not heads:
            raise ValueError("bank needs at least one head")
        primary_k = [h.k for h in heads if h.role == "primary"]
        if primary_k:
            top = max(primary_k)
            for h in heads:
                if h.role == "overcluster" and h.k <= top:
                    raise ValueError(
                        f"overcluster head k={h.k} must exceed primary k={top}"
                    )
        self.heads = heads
        self.in_dim = in_dim
        self.trunk = Sequential([
            Dense(in_dim, hidden, rng, std=init_std, dtype=dtype, name="bank.fc1"),
            Activation("relu"),
            Dense(hidden, hidden, rng, std=init_std, dtype=dtype, name="bank.fc2"),
            Activation("relu"),
        ])
        self.head_layers = [
            Dense(hidden, h.k, rng, std=init_std, dtype=dtype, name=f"bank.head{j}")
            for j, h in enumerate(heads)
        ]

    @property
    def n_heads(self):
        return len(self.heads)

    def params(self):
        out = self.trunk.params()
        for layer in self.head_layers:
            out.extend(layer.params())
        return out

    def trunk_out(self, x):
        return self.trunk.forward(x, _CTX)

    def head_probs(self, trunk_out, head_index):
        logits = self.head_layers[head_index].forward(trunk_out, _CTX)
        return ad.softmax(logits, axis=-1)

    def probs(self, m, head_index, batch_size=4096):
        """Inference-only softmax outputs for raw features (no tape)."""
        m = np.asarray(m)
        chunks = []
        with ad.no_record():
            for start in range(0, len(m), batch_size):
                t = self.trunk_out(Tensor(m[start : start + batch_size]))
                chunks.append(self.head_probs(t, head_index).data)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.heads[head_index].k))


# ---------------------------------------------------------------------------
# objective terms


def _check_rows(p, what):
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    if data.ndim != 2:
        raise ad.ShapeError(f"{what} expects (rows, k), got {data.shape}")
    if np.any(data < 0):
        raise ValueError(f"{what}: negative probabilities")
    sums = data.sum(axis=1)
    if np.abs(sums - 1.0).max(initial=0.0) > 1e-5:
        raise ValueError(f"{what}: rows must sum to 1 within 1e-5")
    return data


def _as_tensor(p):
    return p if isinstance(p, Tensor) else Tensor(np.asarray(p))


def conditional_entropy(probs):
    """Mean Shannon entropy of the rows; always >= 0."""
    _check_rows(probs, "conditional_entropy")
    return ad.entropy_mean(_as_tensor(probs))


def _marginal_kl(probs):
    """KL(column-mean || uniform) = sum p_bar * log(k * p_bar), unclamped."""
    return ad.marginal_kl_uniform(_as_tensor(probs))


def marginal_kl_tolerant(probs, delta):
    """max(KL(mean row || uniform) - delta, 0)."""
    _check_rows(probs, "marginal_kl_tolerant")
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    return ad.relu(_marginal_kl(probs) - float(delta))


def _target_entropy(pd):
    # same numpy ops as the cross term's graph so that p == q gives exactly 0
    return float((pd * np.log(np.clip(pd, PROB_EPS, 1.0))).sum(axis=1).mean())


def kl_divergence(p, q, validate=True, target_entropy=None):
    """Mean row KL(p || q); ``p`` is a constant target for backpropagation.

    ``target_entropy`` may carry a precomputed sum(p log p) row-mean (the
    gradient never depends on it); internal hot paths also skip row
    validation.
    """
    pd = p.data if isinstance(p, Tensor) else np.asarray(p)
    if not isinstance(q, Tensor):
        q = Tensor(np.asarray(q))
    if validate:
        _check_rows(pd, "kl_divergence target")
        _check_rows(q, "kl_divergence argument")
    if pd.shape != q.shape:
        raise ad.ShapeError(f"kl_divergence shapes differ: {pd.shape} vs {q.shape}")
    if target_entropy is None:
        target_entropy = _target_entropy(pd)
    return ad.cross_entropy_mean(pd, q) + float(target_entropy)


# ---------------------------------------------------------------------------
# adversarial perturbation


def _row_norms(m):
    return np.sqrt(np.einsum("ij,ij->i", m, m, dtype=np.float64))


def vat_perturbation(m, bank, head_index, spec: PerturbSpec, rng, p_clean=None):
    """Two-round adversarial direction per feature row.

    Round 1 probes with a random unit direction scaled by alpha_r * ||m_i||;
    round 2 returns the normalized KL gradient scaled by alpha_adv * ||m_i||,
    falling back to the probe direction where the gradient underflows.
    ``p_clean`` may carry precomputed clean predictions for the rows.
    """
    spec.validate()
    m = np.asarray(m)
    norms = _row_norms(m)
    if spec.squared_norm:
        norms = norms**2
    eps_r = (spec.alpha_r * norms)[:, None].astype(m.dtype)
    eps_adv = (spec.alpha_adv * norms)[:, None].astype(m.dtype)

    d0 = rng.standard_normal(m.shape).astype(m.dtype)
    d0 /= np.maximum(_row_norms(d0), _GRAD_FLOOR)[:, None].astype(m.dtype)

    if p_clean is None:
        p_clean = bank.probs(m, head_index)
    # only the input gradient matters here; freezing the bank keeps the
    # probe tape from hauling weight gradients around
    with ad.frozen(bank.params()):
        with Tape() as tape:
            r = Tensor((eps_r * d0).astype(m.dtype), requires_grad=True)
            q = bank.head_probs(bank.trunk_out(Tensor(m) + r), head_index)
            # constant target term irrelevant to the gradient: probe with the
            # cross-entropy part only
            kl = kl_divergence(p_clean, q, validate=False, target_entropy=0.0)
        if not np.isfinite(kl.item()):
            raise RuntimeError("non-finite KL while computing adversarial direction")
        g = ad.backward(kl, tape, [r])[r].data
    gn = _row_norms(g)
    direction = g / np.maximum(gn, _GRAD_FLOOR)[:, None].astype(m.dtype)
    dead = gn < _GRAD_FLOOR
    if dead.any():
        direction[dead] = d0[dead]
    return eps_adv * direction


# ---------------------------------------------------------------------------
# per-head and bank losses


def head_loss(m, m_prime, bank, head_index, spec, lam, rng=None, r_adv=None,
              trunk_clean=None, trunk_prime=None, targets=None):
    """One head's total and its term breakdown.

    ``r_adv`` may be passed in (frozen) for verification; otherwise it is
    drawn from ``rng``. ``trunk_*`` let the bank share forward passes.
    ``targets=(rsat_target, ld_target)`` pins the constant KL targets to
    explicit arrays: consistency terms are trained with the clean prediction
    held constant, and a finite-difference oracle must see that same surface.
    """
    m = np.asarray(m)
    m_prime = np.asarray(m_prime)
    if m.shape != m_prime.shape:
        raise ad.ShapeError(f"m and m' must align: {m.shape} vs {m_prime.shape}")
    head = bank.heads[head_index]

    if trunk_clean is None:
        trunk_clean = bank.trunk_out(Tensor(m))
    if trunk_prime is None:
        trunk_prime = bank.trunk_out(Tensor(m_prime))
    p = bank.head_probs(trunk_clean, head_index)
    p_prime = bank.head_probs(trunk_prime, head_index)

    if r_adv is None:
        m_rep = np.tile(m, (spec.replicas, 1))
        r_adv = vat_perturbation(m_rep, bank, head_index, spec, rng,
                                 p_clean=np.tile(p.data, (spec.replicas, 1)))
    else:
        if r_adv.shape[0] % m.shape[0]:
            raise ad.ShapeError("r_adv row count must be a multiple of the batch")
        m_rep = np.tile(m, (r_adv.shape[0] // m.shape[0], 1))
    q = bank.head_probs(bank.trunk_out(Tensor(m_rep + r_adv)), head_index)
    if targets is None:
        target_rsat = np.tile(p.data, (m_rep.shape[0] // m.shape[0], 1))
        target_ld = p.data
        pe_ld = _target_entropy(target_ld)
        pe_rsat = pe_ld  # row-mean entropy is tile-invariant
    else:
        target_rsat, target_ld = targets
        pe_ld = _target_entropy(target_ld)
        pe_rsat = _target_entropy(target_rsat)

    r_sat = kl_divergence(target_rsat, q, validate=False, target_entropy=pe_rsat)
    l_d = kl_divergence(target_ld, p_prime, validate=False, target_entropy=pe_ld)
    kl_unclamped = _marginal_kl(p)
    kl_clamped = ad.relu(kl_unclamped - float(head.delta))
    cond = conditional_entropy(p)
    total = 0.5 * r_sat + 0.5 * l_d + lam * (kl_clamped + cond)

    terms = HeadTerms(
        r_sat=r_sat.item(), l_d=l_d.item(), kl_unclamped=kl_unclamped.item(),
        kl_clamped=kl_clamped.item(), cond_entropy=cond.item(), total=total.item(),
        role=head.role, k=head.k,
    )
    return total, terms


def bank_loss(m, m_prime, bank, spec, lam, rng=None, r_advs=None, targets=None):
    """Average of head totals; every head sees the same trunk activations."""
    trunk_clean = bank.trunk_out(Tensor(np.asarray(m)))
    trunk_prime = bank.trunk_out(Tensor(np.asarray(m_prime)))
    totals, entries = [], []
    for j in range(bank.n_heads):
        total, terms = head_loss(
            m, m_prime, bank, j, spec, lam, rng=rng,
            r_adv=None if r_advs is None else r_advs[j],
            trunk_clean=trunk_clean, trunk_prime=trunk_prime,
            targets=None if targets is None else targets[j],
        )
        totals.append(total)
        entries.append(terms)
    acc = totals[0]
    for t in totals[1:]:
        acc = ad.add(acc, t)
    mean_total = acc * (1.0 / bank.n_heads)
    return mean_total, LossBreakdown(entries, mean_total.item())


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class ClusterConfig:
    hidden: int = 1024
    init_std: float = 1e-2
    lr: float = 1e-4
    beta1: float = 0.5
    epochs: int = 1000
    batch_size: int = 500
    lam: float = 0.2
    spec: PerturbSpec = field(default_factory=PerturbSpec)
    seed: int = 0


def build_bank(in_dim, heads, config: ClusterConfig, dtype=np.float32):
    rng = np.random.default_rng(config.seed)
    return ClusterBank(in_dim, config.hidden, heads, rng,
                       init_std=config.init_std, dtype=dtype)


def _average_breakdowns(parts):
    heads = []
    for j in range(len(parts[0].heads)):
        entries = [p.heads[j] for p in parts]
        heads.append(HeadTerms(
            r_sat=float(np.mean([e.r_sat for e in entries])),
            l_d=float(np.mean([e.l_d for e in entries])),
            kl_unclamped=float(np.mean([e.kl_unclamped for e in entries])),
            kl_clamped=float(np.mean([e.kl_clamped for e in entries])),
            cond_entropy=float(np.mean([e.cond_entropy for e in entries])),
            total=float(np.mean([e.total for e in entries])),
            role=entries[0].role, k=entries[0].k,
        ))
    return LossBreakdown(heads, float(np.mean([p.bank_total for p in parts])))


def train_epoch(bank, m, m_prime, spec, lam, adam, rng, batch_size=500):
    """One pass over the features in shuffled minibatches; returns the
    batch-averaged breakdown."""
    n = m.shape[0]
    order = rng.permutation(n)
    parts = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        with Tape() as tape:
            loss, breakdown = bank_loss(m[idx], m_prime[idx], bank, spec, lam, rng=rng)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite bank loss in batch at offset {start}")
        adam.step(ad.backward(loss, tape, bank.params()))
        parts.append(breakdown)
    return _average_breakdowns(parts)


def train_bank(bank, m, m_prime, config: ClusterConfig, refresh=None, on_epoch=None):
    """Full phase-2 loop. ``refresh(epoch)`` may supply a fresh m' each epoch
    (regenerated from the discriminator); otherwise the given matrix (or m
    itself) is reused. ``on_epoch(epoch, breakdown)`` observes progress."""
    if m_prime is None:
        m_prime = m
    rng = np.random.default_rng(config.seed)
    adam = Adam(bank.params(), lr=config.lr, beta1=config.beta1)
    history = []
    for epoch in range(config.epochs):
        if refresh is not None:
            m_prime = refresh(epoch)
        breakdown = train_epoch(bank, m, m_prime, config.spec, config.lam, adam,
                                rng, batch_size=config.batch_size)
        history.append(breakdown)
        if on_epoch is not None:
            on_epoch(epoch, breakdown)
    return history


def assign_clusters(bank, head_index, m):
    """Row argmax of the head's softmax; ties go to the lowest index."""
    return np.argmax(bank.probs(m, head_index), axis=1).astype(np.int64)


def select_best_head(breakdown: LossBreakdown):
    """Primary head with the lowest total; overcluster heads never qualify."""
    best, best_total = None, None
    for j, terms in enumerate(breakdown.heads):
        if terms.role != "primary":
            continue
        if best_total is None or terms.total < best_total:
            best, best_total = j, terms.total
    if best is None:
        raise ValueError("bank has no primary heads")
    return best


def default_heads(k, k_prime=None, n_primary=5, n_over=1, delta_primary=None,
                  delta_over=None):
    """Default bank: primary heads at k plus over-cluster heads at k' = 5k.

    Default tolerances: 1e-4 * ln(k) for primary heads, 1e-2 * ln(k') for
    over-cluster heads.
    """
    k_prime = k_prime if k_prime is not None else 5 * k
    dp = delta_primary if delta_primary is not None else 1e-4 * float(np.log(k))
    do = delta_over if delta_over is not None else 1e-2 * float(np.log(k_prime))
    heads = [ClusterHead(k, dp, "primary") for _ in range(n_primary)]
    heads += [ClusterHead(k_prime, do, "overcluster") for _ in range(n_over)]
    return heads
