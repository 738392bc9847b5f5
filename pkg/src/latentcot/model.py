"""Miniature decoder-only multimodal transformer with latent feedback.

Sequences are typed: text segments carry token ids, image segments carry
pre-featurized patch rows, latent segments carry raw d-vectors that bypass the
embedding table. Two mask modes exist: plain causal, and an aux-gated mode
where auxiliary-image keys are visible only to the image itself and to the
latent segment that immediately follows it.

One deliberate architectural rule: latent positions contribute attention
keys/values derived from their layer-0 input state at every layer, while
their residual stream still evolves normally (it produces the vectors that
get fed back). This pins down the information route into later text: only
the latent input vectors themselves carry auxiliary-image content forward,
and with those inputs held fixed, downstream text states are bit-independent
of the auxiliary image.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import vocab


class SegmentRole(enum.Enum):
    QUESTION_TEXT = "question_text"
    QUESTION_IMAGE = "question_image"
    AUX_IMAGE = "aux_image"
    LATENT = "latent"
    OBSERVATION_TEXT = "observation_text"
    PLAIN_TEXT = "plain_text"
    ANSWER = "answer"


TEXT_ROLES = {SegmentRole.QUESTION_TEXT, SegmentRole.OBSERVATION_TEXT,
              SegmentRole.PLAIN_TEXT, SegmentRole.ANSWER}
IMAGE_ROLES = {SegmentRole.QUESTION_IMAGE, SegmentRole.AUX_IMAGE}


class MaskMode(enum.Enum):
    CAUSAL = "causal"
    AUX_GATED = "aux_gated"


class LayoutError(ValueError):
    pass


@dataclass
class ModelConfig:
    layer_count: int = 3
    hidden_dim: int = 64
    head_count: int = 4
    vocab_size: int = vocab.VOCAB_SIZE
    max_positions: int = 160
    patch_dim: int = 1  # grid cells per image patch
    patch_features: int = vocab.PATCH_FEATURES

    def __post_init__(self):
        if self.hidden_dim % self.head_count:
            raise ValueError("hidden_dim must be divisible by head_count")
        if self.patch_dim != 1:
            raise ValueError("only single-cell patches are supported")

    def to_manifest(self) -> dict:
        return {"layer_count": self.layer_count, "hidden_dim": self.hidden_dim,
                "head_count": self.head_count, "vocab_size": self.vocab_size,
                "max_positions": self.max_positions, "patch_dim": self.patch_dim,
                "patch_features": self.patch_features}

    @staticmethod
    def from_manifest(d: dict) -> "ModelConfig":
        return ModelConfig(**{k: int(v) for k, v in d.items()})


@dataclass
class Segment:
    role: SegmentRole
    tokens: list | None = None     # text roles: vocab ids
    feats: np.ndarray | None = None  # image roles: (n_patches, patch_features)
    latents: list | None = None    # latent role: None | ndarray | Tensor per slot

    def __len__(self):
        if self.role in TEXT_ROLES:
            return len(self.tokens)
        if self.role in IMAGE_ROLES:
            return 0 if self.feats is None else self.feats.shape[0]
        return len(self.latents)


def text_segment(role: SegmentRole, tokens) -> Segment:
    return Segment(role, tokens=list(tokens))


def image_segment(role: SegmentRole, feats: np.ndarray) -> Segment:
    return Segment(role, feats=np.asarray(feats, dtype=np.float64))


def latent_segment(count: int, contents=None) -> Segment:
    return Segment(SegmentRole.LATENT, latents=list(contents) if contents is not None
                   else [None] * count)


class SequenceLayout:
    """Ordered typed segments plus derived per-position indexes."""

    def __init__(self, segments):
        self.segments = list(segments)
        self.roles = []
        self.token_at = []  # vocab id or -1
        self.latent_slots = []  # (segment_index, slot_index, position)
        starts = []
        pos = 0
        for si, seg in enumerate(self.segments):
            starts.append(pos)
            n = len(seg)
            self.roles.extend([seg.role] * n)
            if seg.role in TEXT_ROLES:
                self.token_at.extend(seg.tokens)
            else:
                self.token_at.extend([-1] * n)
            if seg.role is SegmentRole.LATENT:
                for k in range(n):
                    self.latent_slots.append((si, k, pos + k))
            pos += n
        self.seg_starts = starts
        self.length = pos
        self.token_at = np.asarray(self.token_at, dtype=np.int64)
        self.latent_mask = np.zeros(self.length, dtype=bool)
        for _, _, p in self.latent_slots:
            self.latent_mask[p] = True

    def positions(self, role: SegmentRole) -> list:
        return [i for i, r in enumerate(self.roles) if r is role]

    def segment_range(self, si: int) -> tuple:
        start = self.seg_starts[si]
        return start, start + len(self.segments[si])

    def latent_source(self, si: int) -> int:
        """Position whose layer-L state seeds slot 0 of latent segment `si`:
        the nearest preceding latent-start marker token, else the position
        just before the segment."""
        start = self.seg_starts[si]
        marker = vocab.TOKEN_TO_ID[vocab.LATENT_START]
        for p in range(start - 1, -1, -1):
            if self.token_at[p] == marker:
                return p
        if start == 0:
            raise LayoutError("latent segment at sequence start has no source position")
        return start - 1

    def set_latent(self, si: int, slot: int, value):
        self.segments[si].latents[slot] = value

    def rebuilt(self) -> "SequenceLayout":
        return SequenceLayout(self.segments)


@dataclass
class AttentionMaskSpec:
    mode: MaskMode
    allow: np.ndarray  # (T, T) bool, allow[q][k]


def build_attention_mask(layout: SequenceLayout, mode: MaskMode) -> AttentionMaskSpec:
    T = layout.length
    allow = np.tril(np.ones((T, T), dtype=bool))
    if mode is MaskMode.AUX_GATED:
        for si, seg in enumerate(layout.segments):
            if seg.role is not SegmentRole.AUX_IMAGE or len(seg) == 0:
                continue
            a0, a1 = layout.segment_range(si)
            if si + 1 >= len(layout.segments) or layout.segments[si + 1].role is not SegmentRole.LATENT:
                raise LayoutError(
                    "aux-gated mask requires each auxiliary image segment to be "
                    "immediately followed by a latent segment")
            l0, l1 = layout.segment_range(si + 1)
            rows = np.zeros(T, dtype=bool)
            rows[a0:a1] = True
            rows[l0:l1] = True
            allow[:, a0:a1] &= rows[:, None]
    return AttentionMaskSpec(mode, allow)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> dict:
    d, V = config.hidden_dim, config.vocab_size
    shapes = {
        "tok_emb": (V, d),
        "pos_emb": (config.max_positions, d),
        "patch_proj": (config.patch_features, d),
    }
    for l in range(config.layer_count):
        p = f"block{l}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "w1"] = (d, 4 * d)
        shapes[p + "b1"] = (4 * d,)
        shapes[p + "w2"] = (4 * d, d)
        shapes[p + "b2"] = (d,)
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    shapes["w_out"] = (d, V)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator, scale: float = 0.02) -> dict:
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("_g",)):
            data = np.ones(shape)
        elif name.endswith(("_b", "b1", "b2")):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, scale, size=shape)
        params[name] = ad.parameter(name, data)
    return params


def zero_params(config: ModelConfig) -> dict:
    return {name: ad.parameter(name, np.zeros(shape))
            for name, shape in param_shapes(config).items()}


def copy_params(params: dict) -> dict:
    return {name: ad.parameter(name, t.data.copy()) for name, t in params.items()}


def params_allclose(a: dict, b: dict) -> bool:
    return all(np.array_equal(a[k].data, b[k].data) for k in a)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def embed_layout(layout: SequenceLayout, params: dict, config: ModelConfig) -> ad.Tensor:
    """One d-vector per position: token lookup, patch projection, or the
    latent slot's content vector verbatim; learned positions added to all."""
    d = config.hidden_dim
    blocks = []
    for seg in layout.segments:
        if len(seg) == 0:
            continue
        if seg.role in TEXT_ROLES:
            ids = np.asarray(seg.tokens, dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
                raise LayoutError(f"unknown token id in segment: {seg.tokens}")
            blocks.append(ad.gather_rows(params["tok_emb"], ids))
        elif seg.role in IMAGE_ROLES:
            if seg.feats.shape[1] != config.patch_features:
                raise LayoutError(
                    f"patch grid feature size {seg.feats.shape[1]} != {config.patch_features}")
            blocks.append(ad.matmul(ad.constant(seg.feats), params["patch_proj"]))
        else:
            for v in seg.latents:
                if v is None:
                    blocks.append(ad.constant(np.zeros((1, d))))
                elif isinstance(v, ad.Tensor):
                    blocks.append(ad.reshape(v, (1, d)))
                else:
                    blocks.append(ad.constant(np.asarray(v, dtype=np.float64).reshape(1, d)))
    if not blocks:
        raise LayoutError("empty layout")
    x = ad.concat_rows(blocks)
    T = layout.length
    if T > config.max_positions:
        raise LayoutError(f"layout length {T} exceeds max_positions {config.max_positions}")
    pos = ad.gather_rows(params["pos_emb"], np.arange(T))
    return ad.add(x, pos)


def _select_rows(a: ad.Tensor, b: ad.Tensor, row_mask: np.ndarray) -> ad.Tensor:
    """Row-exact select: rows of `b` where row_mask, rows of `a` elsewhere."""
    m = row_mask[:, None]
    out = np.where(m, b.data, a.data)

    def vjp(g):
        return (g * ~m, g * m)

    return ad.Tensor(out, (a, b), vjp)


def forward(layout: SequenceLayout, mask: AttentionMaskSpec, params: dict,
            config: ModelConfig):
    """Pre-norm transformer pass.

    Returns (logits (T, V), stack), where stack[0] is the input embedding,
    stack[l] the residual after block l, and stack[L] the post-final-norm
    state (the vector that gets fed back during latent decoding).
    """
    T = layout.length
    if mask.allow.shape != (T, T):
        raise LayoutError(f"mask shape {mask.allow.shape} does not match layout length {T}")
    H = config.head_count
    dh = config.hidden_dim // H
    scale = 1.0 / np.sqrt(dh)
    has_latents = bool(layout.latent_slots)
    allow = np.broadcast_to(mask.allow, (H, T, T))

    x0 = embed_layout(layout, params, config)
    stack = [x0]
    resid = x0
    for l in range(config.layer_count):
        p = f"block{l}."
        q_in = ad.layer_norm(resid, params[p + "ln1_g"], params[p + "ln1_b"])
        if has_latents:
            kv_stream = _select_rows(resid, x0, layout.latent_mask)
            kv_in = ad.layer_norm(kv_stream, params[p + "ln1_g"], params[p + "ln1_b"])
        else:
            kv_in = q_in
        q = _to_heads(ad.matmul(q_in, params[p + "wq"]), H, dh)
        k = _to_heads(ad.matmul(kv_in, params[p + "wk"]), H, dh)
        v = _to_heads(ad.matmul(kv_in, params[p + "wv"]), H, dh)
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), scale)
        probs = ad.masked_softmax(scores, allow)
        attn = _from_heads(ad.matmul(probs, v))
        resid = ad.add(resid, ad.matmul(attn, params[p + "wo"]))
        h = ad.layer_norm(resid, params[p + "ln2_g"], params[p + "ln2_b"])
        h = ad.gelu(ad.add(ad.matmul(h, params[p + "w1"]), params[p + "b1"]))
        resid = ad.add(resid, ad.add(ad.matmul(h, params[p + "w2"]), params[p + "b2"]))
        if l < config.layer_count - 1:
            stack.append(resid)
    final = ad.layer_norm(resid, params["lnf_g"], params["lnf_b"])
    stack.append(final)
    logits = ad.matmul(final, params["w_out"])
    return logits, stack


def _to_heads(x: ad.Tensor, H: int, dh: int) -> ad.Tensor:
    T = x.shape[0]

    def vjp(g):
        return (g.transpose(1, 0, 2).reshape(T, H * dh),)

    return ad.Tensor(x.data.reshape(T, H, dh).transpose(1, 0, 2), (x,), vjp)


def _from_heads(x: ad.Tensor) -> ad.Tensor:
    H, T, dh = x.shape

    def vjp(g):
        return (g.reshape(T, H, dh).transpose(1, 0, 2),)

    return ad.Tensor(x.data.transpose(1, 0, 2).reshape(T, H * dh), (x,), vjp)


# ---------------------------------------------------------------------------
# latent fill (training-time autoregressive slot binding)
# ---------------------------------------------------------------------------

def fill_latents(layout: SequenceLayout, mask: AttentionMaskSpec, params: dict,
                 config: ModelConfig) -> list:
    """Bind every latent slot autoregressively: one ordered pass per slot.

    Slot 0 of a segment reads the layer-L state at its latent-start marker,
    slot k the state at slot k-1. Returns the produced vectors (graph nodes)
    in slot order; the layout's slots are left holding them.
    """
    produced = []
    for si, slot, pos in layout.latent_slots:
        src = layout.latent_source(si) if slot == 0 else pos - 1
        _, stack = forward(layout, mask, params, config)
        vec = ad.get_row(stack[-1], src)
        layout.set_latent(si, slot, vec)
        produced.append(vec)
    return produced


def bind_use_sites(layout: SequenceLayout, produced: list) -> list:
    """Swap live latent contents for identity-wrapped copies.

    The identity nodes mark the final-pass use sites, so a gradient taken with
    respect to them excludes the production path through later slots.
    """
    sites = []
    i = 0
    for si, slot, _ in layout.latent_slots:
        u = ad.identity(produced[i])
        layout.set_latent(si, slot, u)
        sites.append(u)
        i += 1
    return sites


# ---------------------------------------------------------------------------
# sampling and decoding
# ---------------------------------------------------------------------------

def sample_token(logits: np.ndarray, temperature: float, rng: np.random.Generator | None):
    """Returns (token id, log-probability under the sampling distribution)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        return int(np.argmax(logits)), 0.0
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.random()
    tok = int(np.searchsorted(np.cumsum(p), u))
    tok = min(tok, len(p) - 1)
    return tok, float(np.log(p[tok]))


@dataclass
class TextStep:
    token: int
    logp: float
    forced: bool = False  # forced steps carry no ratio term


@dataclass
class LatentStep:
    vector: np.ndarray


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    prompt_len: int = 0
    truncated: bool = False

    def latent_run_lengths(self) -> list:
        runs, cur = [], None
        for s in self.steps:
            if isinstance(s, LatentStep):
                cur = 0 if cur is None else cur
                cur += 1
            elif cur is not None:
                runs.append(cur)
                cur = None
        if cur is not None:
            runs.append(cur)
        return runs


_ID_LATENT_START = vocab.TOKEN_TO_ID[vocab.LATENT_START]
_ID_LATENT_END = vocab.TOKEN_TO_ID[vocab.LATENT_END]
_ID_EOS = vocab.TOKEN_TO_ID[vocab.EOS]


def decode_with_latents(prompt: SequenceLayout, k_latent: int, params: dict,
                        config: ModelConfig, temperature: float = 0.0,
                        rng: np.random.Generator | None = None,
                        max_new: int = 64):
    """Autoregressive decoding with fixed-length latent runs.

    Sampling a latent-start token opens a run of exactly `k_latent` latent
    steps, each feeding the previous position's layer-L state back in as the
    next input embedding; the latent-end token is then force-inserted, never
    sampled. Returns (full layout, Trajectory).
    """
    if k_latent < 0:
        raise ValueError("k_latent must be >= 0")
    segments = list(prompt.segments)
    traj = Trajectory(prompt_len=prompt.length)
    causal = MaskMode.CAUSAL

    def run():
        layout = SequenceLayout(segments)
        with ad.no_grad():
            logits, stack = forward(layout, build_attention_mask(layout, causal), params, config)
        return logits.data, stack[-1].data

    def append_token(tok):
        segments.append(text_segment(SegmentRole.PLAIN_TEXT, [tok]))

    emitted = 0
    while emitted < max_new:
        logits, _ = run()
        tok, logp = sample_token(logits[-1], temperature, rng)
        append_token(tok)
        traj.steps.append(TextStep(tok, logp))
        emitted += 1
        if tok == _ID_EOS:
            break
        if tok == _ID_LATENT_START:
            for _ in range(k_latent):
                if emitted >= max_new:
                    traj.truncated = True
                    break
                _, final = run()
                vec = final[-1].copy()
                segments.append(latent_segment(1, [vec]))
                traj.steps.append(LatentStep(vec))
                emitted += 1
            if traj.truncated:
                break
            append_token(_ID_LATENT_END)
            traj.steps.append(TextStep(_ID_LATENT_END, 0.0, forced=True))
            emitted += 1
    else:
        traj.truncated = True
    return SequenceLayout(segments), traj


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    stage: str
    step: int
    seed: int
    params: dict  # name -> Tensor


STAGE_LABELS = ("base", "warmup", "stage2", "sft", "rl")


def save_checkpoint(ckpt: Checkpoint, path):
    shapes = param_shapes(ckpt.config)
    if list(shapes) != list(ckpt.params):
        raise ValueError("checkpoint parameters do not match the declared order")
    lines = [f"{k}={v}" for k, v in ckpt.config.to_manifest().items()]
    lines += [f"stage={ckpt.stage}", f"step={ckpt.step}", f"seed={ckpt.seed}"]
    blob = b"".join(np.ascontiguousarray(ckpt.params[n].data, dtype="<f8").tobytes()
                    for n in shapes)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n---\n").encode())
        f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    head, _, blob = raw.partition(b"\n---\n")
    meta = dict(line.split("=", 1) for line in head.decode().splitlines())
    config = ModelConfig.from_manifest({k: meta[k] for k in ModelConfig().to_manifest()})
    params = {}
    offset = 0
    for name, shape in param_shapes(config).items():
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[name] = ad.parameter(name, arr.copy())
        offset += n * 8
    if offset != len(blob):
        raise ValueError(f"checkpoint blob length mismatch: {len(blob)} bytes, expected {offset}")
    return Checkpoint(config, meta["stage"], int(meta["step"]), int(meta["seed"]), params)
