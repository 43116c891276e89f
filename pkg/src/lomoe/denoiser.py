"""Noise prediction over analytic toy worlds, plus the attention read-out head.

A ToyWorld assigns every prompt a Gaussian mixture over full-image latent
grids.  For such a prior the Bayes-optimal noise predictor has a closed
form, so every downstream formula can be tested against exact oracles
instead of a trained network.

The attention head is a read-out: it produces per-pixel token
distributions for the preservation losses but never feeds back into the
noise prediction, which keeps the predictor exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .grids import SeededRng, as_grid, softmax_tau
from .schedule import NoiseSchedule, make_step_map, ddim_denoise_step

PROMPT_LEN = 4
NULL_TOKEN = 0
NULL_STD = 3.0
MAX_MIXTURE_COMPONENTS = 16
TEMB_DIM = 8


@dataclass(frozen=True)
class PromptSpec:
    """A fixed-length token-id sequence; id 0 is the null token.

    The all-null prompt is the unconditional branch.  ``label`` is free
    text for logs only and never affects computation.
    """

    tokens: tuple
    label: str = ""

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        if not toks:
            raise ValueError("prompt must have at least one token slot")
        if any(t < 0 for t in toks):
            raise ValueError("token ids must be non-negative")
        object.__setattr__(self, "tokens", toks)

    @property
    def is_null(self) -> bool:
        return all(t == NULL_TOKEN for t in self.tokens)


def make_prompt(token_ids, label: str = "", length: int = PROMPT_LEN) -> PromptSpec:
    """Pad ``token_ids`` with null tokens to the fixed prompt length."""
    toks = tuple(int(t) for t in token_ids)
    if len(toks) > length:
        raise ValueError(f"prompt has {len(toks)} tokens, limit is {length}")
    return PromptSpec(tokens=toks + (NULL_TOKEN,) * (length - len(toks)), label=label)


def null_prompt(length: int = PROMPT_LEN) -> PromptSpec:
    return PromptSpec(tokens=(NULL_TOKEN,) * length, label="null")


@dataclass(frozen=True)
class Component:
    """One mixture component: isotropic Gaussian N(mean, std^2 I)."""

    weight: float
    mean: np.ndarray
    std: float


@dataclass(frozen=True)
class ToyWorld:
    """Prompt-conditioned Gaussian-mixture prior over latent grids.

    ``components[k]`` is token k's mixture; per-token weights sum to 1.
    Token 0 must be present and plays the null role (conventionally a
    single broad component centred at zero).
    """

    vocab: int
    components: dict
    shape: tuple
    labels: dict | None = None

    def __post_init__(self):
        if self.vocab < 1:
            raise ValueError("vocab must be >= 1")
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"world shape must be (H, W, C), got {self.shape}")
        comps = {}
        for tok, clist in self.components.items():
            tok = int(tok)
            if not 0 <= tok < self.vocab:
                raise ValueError(f"token id {tok} outside vocabulary of size {self.vocab}")
            clist = tuple(clist)
            if not clist:
                raise ValueError(f"token {tok} has no components")
            total = 0.0
            for comp in clist:
                if comp.std <= 0.0:
                    raise ValueError(f"token {tok}: component std must be > 0")
                if comp.mean.shape != shape:
                    raise ValueError(
                        f"token {tok}: mean shape {comp.mean.shape} != world shape {shape}"
                    )
                comp.mean.flags.writeable = False
                total += comp.weight
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"token {tok}: weights sum to {total}, expected 1")
            comps[tok] = clist
        if NULL_TOKEN not in comps:
            raise ValueError("world must define the null token (id 0)")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "components", MappingProxyType(comps))
        labels = dict(self.labels or {})
        object.__setattr__(self, "labels", MappingProxyType(labels))

    def token_components(self, tok: int) -> tuple:
        if tok not in self.components:
            raise ValueError(f"unknown token id {tok}")
        return self.components[tok]

    def mixture(self, prompt: PromptSpec) -> list:
        """The prompt's mixture as (weight, mean grid, variance) triples.

        Non-null tokens contribute independently and their contributions
        add, so the prompt mixture is the Cartesian product of the active
        tokens' components with means and variances summed and weights
        multiplied.  The all-null prompt is the null token's own mixture.
        Mixtures larger than 16 components keep the heaviest 16 and
        renormalize.
        """
        active = [t for t in prompt.tokens if t != NULL_TOKEN]
        if not active:
            return [(c.weight, c.mean, c.std**2) for c in self.token_components(NULL_TOKEN)]
        per_token = [self.token_components(t) for t in active]
        out = []
        for combo in itertools.product(*per_token):
            w = 1.0
            mean = np.zeros(self.shape, dtype=np.float64)
            var = 0.0
            for c in combo:
                w *= c.weight
                mean = mean + c.mean
                var += c.std**2
            out.append((w, mean, var))
        if len(out) > MAX_MIXTURE_COMPONENTS:
            order = sorted(range(len(out)), key=lambda i: (-out[i][0], i))
            out = [out[i] for i in order[:MAX_MIXTURE_COMPONENTS]]
        total = sum(w for w, _, _ in out)
        return [(w / total, m, v) for w, m, v in out]


def make_world(shape, tokens, labels=None) -> ToyWorld:
    """Build a world from {token id: [(weight, mean, std), ...]}.

    Token 0 is added automatically as the broad null component (mean 0,
    std 3) unless the caller supplies it.
    """
    shape = tuple(shape)
    comps = {}
    for tok, clist in tokens.items():
        comps[int(tok)] = tuple(
            Component(float(w), np.array(m, dtype=np.float64), float(s))
            for w, m, s in clist
        )
    if NULL_TOKEN not in comps:
        comps[NULL_TOKEN] = (Component(1.0, np.zeros(shape), NULL_STD),)
    vocab = max(comps) + 1
    return ToyWorld(vocab=vocab, components=comps, shape=shape, labels=labels)


def predict_noise(
    x_t: np.ndarray, t: int, c: PromptSpec, world: ToyWorld, sched: NoiseSchedule
) -> np.ndarray:
    """Exact Bayes-optimal noise prediction for the prompt's mixture.

    With x_t = sqrt(ab) x_0 + sqrt(1-ab) eps and x_0 drawn from the
    mixture, the posterior over x_0 is again a mixture whose component
    responsibilities and shrunken means are closed-form; the prediction
    is eps_hat = (x_t - sqrt(ab) E[x_0 | x_t, c]) / sqrt(1 - ab).
    Responsibilities are computed in log space.
    """
    x_t = as_grid(x_t, "x_t")
    if x_t.shape != world.shape:
        raise ValueError(f"x_t shape {x_t.shape} != world shape {world.shape}")
    if t < 1:
        raise ValueError(f"predict_noise needs t >= 1, got {t}")
    ab = sched.abar(t)
    sq_ab = np.sqrt(ab)
    comps = world.mixture(c)
    n = x_t.size

    logliks = np.empty(len(comps))
    for k, (w, mean, var) in enumerate(comps):
        marg_var = ab * var + (1.0 - ab)
        resid = x_t - sq_ab * mean
        logliks[k] = (
            np.log(w)
            - 0.5 * n * np.log(2.0 * np.pi * marg_var)
            - 0.5 * float(np.sum(resid * resid)) / marg_var
        )
    resp = softmax_tau(logliks, 1.0)

    post_mean = np.zeros_like(x_t)
    for r, (w, mean, var) in zip(resp, comps):
        marg_var = ab * var + (1.0 - ab)
        gain = sq_ab * var / marg_var
        post_mean += r * (mean + gain * (x_t - sq_ab * mean))
    return (x_t - sq_ab * post_mean) / np.sqrt(1.0 - ab)


def guided_noise(
    x_t: np.ndarray,
    t: int,
    c: PromptSpec,
    w: float,
    world: ToyWorld,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Classifier-free combination of conditional and null predictions.

    w=1 returns the conditional prediction exactly (no arithmetic), w=0
    the unconditional one.
    """
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    if w == 1.0:
        return predict_noise(x_t, t, c, world, sched)
    eps_null = predict_noise(x_t, t, null_prompt(len(c.tokens)), world, sched)
    if w == 0.0:
        return eps_null
    eps_cond = predict_noise(x_t, t, c, world, sched)
    return eps_null + w * (eps_cond - eps_null)


@dataclass(frozen=True)
class AttentionHead:
    """Seeded query/key projections for the per-pixel token read-out.

    Features per pixel are the latent channels concatenated with an
    8-dim sinusoidal embedding of t/t_total.  There is deliberately no
    value projection: only the maps themselves are consumed.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    emb: np.ndarray
    d: int
    t_total: int
    channels: int
    seed: int

    def __post_init__(self):
        feat = self.channels + TEMB_DIM
        if self.w_q.shape != (feat, self.d):
            raise ValueError(f"w_q shape {self.w_q.shape} != ({feat}, {self.d})")
        if self.w_k.shape[1] != self.d or self.emb.shape[1] != self.w_k.shape[0]:
            raise ValueError("w_k / embedding dims inconsistent")
        for a in (self.w_q, self.w_k, self.emb):
            if not np.all(np.isfinite(a)):
                raise ValueError("attention head matrices must be finite")
            a.flags.writeable = False

    @property
    def vocab(self) -> int:
        return self.emb.shape[0]


def make_attention_head(
    seed: int,
    channels: int,
    vocab: int,
    t_total: int,
    embed_dim: int = 8,
    proj_dim: int = 4,
    gain: float = 3.0,
) -> AttentionHead:
    """Deterministically regenerate a head from (seed, dims).

    Projections are scaled gain/sqrt(fan_in); the default gain gives
    order-one logit spreads on unit-scale latents, so temperature
    actually modulates map sharpness instead of leaving every row close
    to uniform.
    """
    rng = SeededRng(seed, stream=0x41545448)
    emb = rng.child(1).normal((vocab, embed_dim))
    feat = channels + TEMB_DIM
    w_q = rng.child(2).normal((feat, proj_dim)) * (gain / np.sqrt(feat))
    w_k = rng.child(3).normal((embed_dim, proj_dim)) * (gain / np.sqrt(embed_dim))
    return AttentionHead(
        w_q=w_q, w_k=w_k, emb=emb, d=proj_dim, t_total=t_total, channels=channels, seed=seed
    )


def time_embedding(t: int, t_total: int) -> np.ndarray:
    """8-dim sinusoid of the normalized timestep, frequencies 2^0..2^7."""
    freqs = 2.0 ** np.arange(TEMB_DIM)
    return np.sin(freqs * (t / t_total))


@dataclass(frozen=True)
class AttentionMap:
    """Per-pixel probability distribution over the prompt's token slots."""

    values: np.ndarray
    tau: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"attention values must be (H, W, L), got {v.shape}")
        if not np.allclose(v.sum(axis=-1), 1.0, atol=1e-6):
            raise ValueError("attention rows must sum to 1")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def token_keys(head: AttentionHead, c: PromptSpec) -> np.ndarray:
    """K = embed(tokens) W_K, one d-dim key per prompt slot."""
    for tok in c.tokens:
        if tok >= head.vocab:
            raise ValueError(f"token id {tok} outside head vocabulary {head.vocab}")
    return head.emb[list(c.tokens)] @ head.w_k


def attention_logits(x_t: np.ndarray, t: int, c: PromptSpec, head: AttentionHead) -> np.ndarray:
    """Pre-softmax scores (H, W, L): per-pixel query dotted with token keys."""
    x_t = as_grid(x_t, "x_t")
    if x_t.shape[2] != head.channels:
        raise ValueError(f"x_t has {x_t.shape[2]} channels, head expects {head.channels}")
    h, w, _ = x_t.shape
    temb = time_embedding(t, head.t_total)
    feats = np.concatenate([x_t, np.broadcast_to(temb, (h, w, TEMB_DIM))], axis=2)
    q = feats @ head.w_q
    k = token_keys(head, c)
    return q @ k.T / np.sqrt(head.d)


def attention_maps(
    x_t: np.ndarray, t: int, c: PromptSpec, head: AttentionHead, tau: float
) -> AttentionMap:
    """Temperature-softmaxed token attention per pixel (rows sum to 1)."""
    logits = attention_logits(x_t, t, c, head)
    return AttentionMap(values=softmax_tau(logits, tau), tau=tau)


def attention_input_map(head: AttentionHead, c: PromptSpec) -> np.ndarray:
    """Jacobian of the logits w.r.t. the latent channels at any pixel.

    d logit[p, l] / d x[p, ch] = (W_Q[:C] K^T / sqrt(d))[ch, l]; the time
    embedding rows of W_Q never touch x, so this (C, L) matrix is shared
    by every pixel.
    """
    k = token_keys(head, c)
    return head.w_q[: head.channels] @ k.T / np.sqrt(head.d)


def sample(
    c: PromptSpec, seed: int, steps: int, world: ToyWorld, sched: NoiseSchedule
) -> np.ndarray:
    """Plain backward process from seeded noise under the prompt."""
    if steps < 1:
        raise ValueError(f"sample needs steps >= 1, got {steps}")
    x = SeededRng(seed).normal(world.shape)
    for t_hi, t_lo in make_step_map(sched.t_total, steps).pairs_descending():
        eps_hat = predict_noise(x, t_hi, c, world, sched)
        x = ddim_denoise_step(x, eps_hat, t_hi, t_lo, sched)
    return x
