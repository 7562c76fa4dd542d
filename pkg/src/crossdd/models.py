"""Modality encoders, fusion heads and the gradient reversal branch.

Parameters live in a flat ``{name: ndarray}`` dict. A forward pass receives
the same names mapped to :class:`~crossdd.autodiff.Tensor` objects, either
leaves on a tape (training) or plain tensors (evaluation).

Layout conventions:

* modality inputs are ``[B, T, D_m]`` (T frames of D_m channels);
* the encoder's stage 1 maps each frame ``D_m -> 64 -> 128 -> 1`` giving the
  token tap ``[B, T, 1]``; stage 2 maps the token axis ``T -> 32 -> 16 -> 2``;
* fusion methods work on the concatenated tokens ``U`` of shape ``[B, T, N_m]``.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .synthetic import DEFAULT_DIMS, MODALITIES


class ConfigError(ValueError):
    """Invalid model configuration."""


class Fusion(str, enum.Enum):
    AVERAGE = "average"
    CONCAT = "concat"
    SE_CONCAT = "se-concat"
    CROSS_ATTEN = "cross-atten"
    MLP_MIXER = "mlp-mixer"
    ATTEN_MIXER = "atten-mixer"

    @classmethod
    def parse(cls, value) -> "Fusion":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ConfigError(f"unknown fusion method {value!r}; valid: {valid}") from None


ENCODER_WIDTHS = (64, 128, 1)
CLASSIFIER_WIDTHS = (32, 16, 2)
HEAD_HIDDEN = 64


@dataclass
class ModelConfig:
    modalities: tuple = MODALITIES
    input_dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    n_tokens: int = 64
    fusion: Fusion = Fusion.ATTEN_MIXER
    n_layers: int = 6
    n_heads: int = 4
    attn_dim: int = 32
    token_hidden: int = 64
    channel_hidden: int = 16
    activation: str = "gelu"
    readout: str = "project"  # "project": mean tokens -> Linear(N_m, 128); "mean": no projection
    readout_dim: int = 128
    se_reduction: int = 4
    cross_dim: int = 16
    ln_eps: float = 1e-5
    grl: Optional[float] = None
    n_domains: int = 0
    seed: int = 0

    def __post_init__(self):
        self.fusion = Fusion.parse(self.fusion)
        self.modalities = tuple(self.modalities)

    def validate(self) -> None:
        if len(self.modalities) < 2:
            raise ConfigError("fusion needs at least 2 modalities")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modality names")
        missing = [m for m in self.modalities if m not in self.input_dims]
        if missing:
            raise ConfigError(f"no input dimension for {missing}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.attn_dim % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide attn_dim={self.attn_dim}")
        if self.cross_dim % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide cross_dim={self.cross_dim}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"activation must be 'gelu' or 'relu', got {self.activation!r}")
        if self.readout not in ("project", "mean"):
            raise ConfigError(f"readout must be 'project' or 'mean', got {self.readout!r}")
        if self.grl is not None and (self.grl < 0 or self.n_domains < 2):
            raise ConfigError("a GRL branch needs a nonnegative constant and n_domains >= 2")


def sub(params: Mapping[str, object], prefix: str) -> Dict[str, object]:
    """View of ``params`` restricted to ``prefix`` with the prefix stripped."""
    cut = len(prefix)
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _dense(rs: np.random.Generator, out: dict, name: str, fan_in: int, fan_out: int,
           bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    out[f"{name}.W"] = rs.uniform(-bound, bound, size=(fan_in, fan_out))
    if bias:
        out[f"{name}.b"] = rs.uniform(-bound, bound, size=fan_out)


def _norm(out: dict, name: str, width: int) -> None:
    out[f"{name}.ln_g"] = np.ones(width)
    out[f"{name}.ln_b"] = np.zeros(width)


def _mlp_stack(rs, out: dict, prefix: str, widths: Sequence[int]) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        _dense(rs, out, f"{prefix}.{i}", a, b)
        if i < len(widths) - 2:
            _norm(out, f"{prefix}.{i}", b)


def mixer_layer_params(rs: np.random.Generator, T: int, C: int, cfg: ModelConfig,
                       attention: bool = True) -> dict:
    p: dict = {}
    _norm(p, "tok", T)
    _dense(rs, p, "tok.1", T, cfg.token_hidden)
    _dense(rs, p, "tok.2", cfg.token_hidden, T)
    if attention:
        for name in ("q", "k", "v"):
            _dense(rs, p, f"attn.{name}", C, cfg.attn_dim, bias=False)
        _dense(rs, p, "attn.o", cfg.attn_dim, C, bias=False)
    _norm(p, "ch", C)
    _dense(rs, p, "ch.1", C, cfg.channel_hidden)
    _dense(rs, p, "ch.2", cfg.channel_hidden, C)
    return p


def init_params(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    cfg.validate()
    rs = np.random.default_rng(cfg.seed)
    T, C = cfg.n_tokens, len(cfg.modalities)
    params: Dict[str, np.ndarray] = {}
    for m in cfg.modalities:
        _mlp_stack(rs, params, f"{m}.enc", (cfg.input_dims[m],) + ENCODER_WIDTHS)
        _mlp_stack(rs, params, f"{m}.cls", (T,) + CLASSIFIER_WIDTHS)

    f = cfg.fusion
    fp: dict = {}
    if f in (Fusion.ATTEN_MIXER, Fusion.MLP_MIXER):
        for layer in range(cfg.n_layers):
            lp = mixer_layer_params(rs, T, C, cfg, attention=f is Fusion.ATTEN_MIXER)
            fp.update({f"layer{layer}.{k}": v for k, v in lp.items()})
        head_in = C
    elif f is Fusion.SE_CONCAT:
        r = max(1, C // cfg.se_reduction)
        _dense(rs, fp, "se.1", C, r)
        _dense(rs, fp, "se.2", r, C)
        head_in = T * C
    elif f is Fusion.CROSS_ATTEN:
        for m in cfg.modalities:
            _dense(rs, fp, f"ca.{m}.embed", 1, cfg.cross_dim)
            for name in ("q", "k", "v", "o"):
                _dense(rs, fp, f"ca.{m}.{name}", cfg.cross_dim, cfg.cross_dim, bias=False)
        head_in = C * cfg.cross_dim
    elif f is Fusion.CONCAT:
        head_in = T * C
    else:
        head_in = None
    if head_in is not None:
        if f in (Fusion.ATTEN_MIXER, Fusion.MLP_MIXER) and cfg.readout == "mean":
            cls_in = head_in
        else:
            _dense(rs, fp, "proj", head_in, cfg.readout_dim)
            cls_in = cfg.readout_dim
        _dense(rs, fp, "head.0", cls_in, HEAD_HIDDEN)
        _dense(rs, fp, "head.1", HEAD_HIDDEN, 2)
    params.update({f"fusion.{k}": v for k, v in fp.items()})

    if cfg.grl is not None:
        for m in cfg.modalities:
            _dense(rs, params, f"dom.{m}.0", T, 32)
            _dense(rs, params, f"dom.{m}.1", 32, cfg.n_domains)
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _dense_apply(x, p, name):
    return ad.linear(x, p[f"{name}.W"], p.get(f"{name}.b"))


def _ln(x, p, name, eps):
    return ad.layer_norm(x, p[f"{name}.ln_g"], p[f"{name}.ln_b"], eps)


def encode(x, p: Mapping[str, object], eps: float = 1e-5):
    """Unimodal branch: ``(tokens [B,T,1], logits [B,2])``.

    ``p`` holds the branch's parameters with the modality prefix stripped
    (``enc.*`` for stage 1, ``cls.*`` for stage 2).
    """
    x = ad.as_tensor(x)
    D = p["enc.0.W"].shape[0]
    if x.ndim != 3 or x.shape[-1] != D:
        raise ConfigError(f"encode: expected input [B, T, {D}], got {x.shape}")
    T = p["cls.0.W"].shape[0]
    if x.shape[1] != T:
        raise ConfigError(f"encode: expected {T} frames, got {x.shape[1]}")
    B = x.shape[0]
    h = x
    for i in range(2):
        h = ad.relu(_ln(_dense_apply(h, p, f"enc.{i}"), p, f"enc.{i}", eps))
    tokens = _dense_apply(h, p, "enc.2")
    s = ad.reshape(tokens, (B, T))
    for i in range(2):
        s = ad.relu(_ln(_dense_apply(s, p, f"cls.{i}"), p, f"cls.{i}", eps))
    return tokens, _dense_apply(s, p, "cls.2")


def multi_head_attention(query, context, Wq, Wk, Wv, Wo, n_heads: int):
    """Scaled dot-product attention of ``query`` [B,Tq,C] over ``context`` [B,Tk,C]."""
    B, Tq = query.shape[0], query.shape[1]
    Tk = context.shape[1]
    A = Wq.shape[1]
    dh = A // n_heads

    def heads(t, n):
        return ad.transpose(ad.reshape(t, (B, n, n_heads, dh)), (0, 2, 1, 3))

    Q = heads(ad.linear(query, Wq), Tq)
    K = heads(ad.linear(context, Wk), Tk)
    V = heads(ad.linear(context, Wv), Tk)
    scores = ad.scalar_mul(ad.matmul(Q, ad.transpose(K, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = ad.matmul(ad.softmax_axis(scores, -1), V)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, Tq, A))
    return ad.linear(out, Wo)


def attention_mixer_layer(U, p: Mapping[str, object], n_heads: int = 4,
                          activation: str = "gelu", eps: float = 1e-5):
    """One mixer layer on ``U`` [B, T, N_m]; shape is preserved.

    Token-mixing MLP per channel, then multi-head self-attention across the
    T tokens (skipped when ``p`` has no ``attn.*`` weights, which gives the
    plain MLP-Mixer layer), then channel-mixing MLP per token. All three
    stages are residual.
    """
    U = ad.as_tensor(U)
    if U.ndim != 3:
        raise ConfigError(f"mixer layer expects [B, T, N_m], got {U.shape}")
    if U.shape[2] < 2:
        raise ConfigError("fusion needs at least 2 modality channels")
    X = ad.transpose(U, (0, 2, 1))
    Y = _dense_apply(ad.activation(_dense_apply(_ln(X, p, "tok", eps), p, "tok.1"), activation),
                     p, "tok.2")
    U = ad.add(U, ad.transpose(Y, (0, 2, 1)))
    if "attn.q.W" in p:
        U = ad.add(U, multi_head_attention(U, U, p["attn.q.W"], p["attn.k.W"],
                                           p["attn.v.W"], p["attn.o.W"], n_heads))
    Z = _dense_apply(ad.activation(_dense_apply(_ln(U, p, "ch", eps), p, "ch.1"), activation),
                     p, "ch.2")
    return ad.add(U, Z)


def _stack_tokens(tokens: Sequence) -> ad.Tensor:
    tokens = [ad.as_tensor(t) for t in tokens]
    if len(tokens) < 2:
        raise ConfigError("fusion needs at least 2 modalities")
    B, T = tokens[0].shape[0], tokens[0].shape[1]
    for t in tokens:
        if t.ndim != 3 or t.shape[0] != B or t.shape[1] != T or t.shape[2] != 1:
            raise ConfigError(f"token tensors must all be [{B}, {T}, 1], got {t.shape}")
    return ad.concat_axis(tokens, 2)


def _classifier(h, p):
    return _dense_apply(ad.relu(_dense_apply(h, p, "head.0")), p, "head.1")


def _readout(h, p):
    if "proj.W" in p:
        h = _dense_apply(h, p, "proj")
    return _classifier(h, p)


def atten_mixer_fusion(tokens: Sequence, p: Mapping[str, object], n_heads: int = 4,
                       activation: str = "gelu", eps: float = 1e-5):
    """Stacked mixer layers over concatenated tokens, mean-pooled to 2 logits.

    Layers are read from ``layer0.*``, ``layer1.*``, ... in ``p``; the same
    function evaluates the MLP-Mixer baseline when the layers carry no
    attention weights.
    """
    U = _stack_tokens(tokens)
    layer = 0
    while f"layer{layer}.tok.ln_g" in p:
        U = attention_mixer_layer(U, sub(p, f"layer{layer}."), n_heads, activation, eps)
        layer += 1
    if layer == 0:
        raise ConfigError("no mixer layers in parameters")
    return _readout(ad.mean_axis(U, 1), p)


def _concat_fusion(tokens, p):
    U = _stack_tokens(tokens)
    B, T, C = U.shape
    return _readout(ad.reshape(U, (B, T * C)), p)


def se_gates(U, p):
    """Squeeze-excitation gates [B, N_m] from token means."""
    s = ad.mean_axis(U, 1)
    return ad.sigmoid(_dense_apply(ad.relu(_dense_apply(s, p, "se.1")), p, "se.2"))


def _se_concat_fusion(tokens, p):
    U = _stack_tokens(tokens)
    B, T, C = U.shape
    U = ad.mul(U, ad.reshape(se_gates(U, p), (B, 1, C)))
    return _readout(ad.reshape(U, (B, T * C)), p)


def _cross_atten_fusion(tokens, p, modalities, n_heads):
    _stack_tokens(tokens)
    embedded = [_dense_apply(t, p, f"ca.{m}.embed") for t, m in zip(tokens, modalities)]
    pooled = []
    for i, m in enumerate(modalities):
        others = [e for j, e in enumerate(embedded) if j != i]
        ctx = others[0] if len(others) == 1 else ad.concat_axis(others, 1)
        att = multi_head_attention(embedded[i], ctx, p[f"ca.{m}.q.W"], p[f"ca.{m}.k.W"],
                                   p[f"ca.{m}.v.W"], p[f"ca.{m}.o.W"], n_heads)
        pooled.append(ad.mean_axis(ad.add(embedded[i], att), 1))
    return _readout(ad.concat_axis(pooled, 1), p)


def average_scores(logits: Sequence) -> ad.Tensor:
    """Mean of per-modality softmax score vectors."""
    if len(logits) < 2:
        raise ConfigError("score averaging needs at least 2 modalities")
    probs = [ad.softmax_axis(ad.as_tensor(l), -1) for l in logits]
    total = probs[0]
    for pr in probs[1:]:
        total = ad.add(total, pr)
    return ad.scalar_mul(total, 1.0 / len(probs))


def fuse_baseline(method, tokens: Optional[Sequence] = None, logits: Optional[Sequence] = None,
                  p: Optional[Mapping[str, object]] = None, modalities: Sequence[str] = MODALITIES,
                  n_heads: int = 4, activation: str = "gelu", eps: float = 1e-5):
    """Fuse modalities with any registered method.

    ``average`` consumes per-modality logits and returns fused scores
    (probabilities); every other method consumes tokens and returns logits.
    """
    method = Fusion.parse(method)
    if method is Fusion.AVERAGE:
        return average_scores(logits)
    if method is Fusion.CONCAT:
        return _concat_fusion(tokens, p)
    if method is Fusion.SE_CONCAT:
        return _se_concat_fusion(tokens, p)
    if method is Fusion.CROSS_ATTEN:
        return _cross_atten_fusion(tokens, p, list(modalities)[: len(tokens)], n_heads)
    return atten_mixer_fusion(tokens, p, n_heads, activation, eps)


grl = ad.grl


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    tokens: Dict[str, ad.Tensor]
    logits: Dict[str, ad.Tensor]
    fusion_logits: Optional[ad.Tensor]
    fusion_scores: ad.Tensor  # [B, 2] probabilities
    domain_logits: Dict[str, ad.Tensor]


class ModelBundle:
    """Parameters plus the configuration needed to run them."""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None):
        config.validate()
        self.config = config
        self.params = init_params(config) if params is None else dict(params)

    def copy(self) -> "ModelBundle":
        return ModelBundle(replace(self.config),
                           {k: v.copy() for k, v in self.params.items()})

    def bind(self, tape: Optional[ad.Tape]) -> Dict[str, ad.Tensor]:
        if tape is None:
            return {k: ad.Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v, k) for k, v in self.params.items()}

    def forward(self, batch: Mapping[str, np.ndarray], bound: Optional[Mapping] = None) -> ForwardOutput:
        cfg = self.config
        bound = self.bind(None) if bound is None else bound
        tokens, logits = {}, {}
        for m in cfg.modalities:
            tokens[m], logits[m] = encode(batch[m], sub(bound, f"{m}."), cfg.ln_eps)
        token_list = [tokens[m] for m in cfg.modalities]
        if cfg.fusion is Fusion.AVERAGE:
            fusion_logits = None
            scores = average_scores([logits[m] for m in cfg.modalities])
        else:
            fusion_logits = fuse_baseline(cfg.fusion, token_list, None, sub(bound, "fusion."),
                                          cfg.modalities, cfg.n_heads, cfg.activation, cfg.ln_eps)
            scores = ad.softmax_axis(fusion_logits, -1)
        domain_logits = {}
        if cfg.grl is not None:
            B = token_list[0].shape[0]
            for m in cfg.modalities:
                h = ad.grl(ad.reshape(tokens[m], (B, cfg.n_tokens)), cfg.grl)
                dp = sub(bound, f"dom.{m}.")
                domain_logits[m] = _dense_apply(ad.relu(_dense_apply(h, dp, "0")), dp, "1")
        return ForwardOutput(tokens, logits, fusion_logits, scores, domain_logits)

    def predict_scores(self, batch: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.forward(batch).fusion_scores.data

    def partition(self, m1: str, m2: str, generalized: bool = False) -> Dict[str, str]:
        """Label every parameter ``m1``, ``m2`` or ``rest``.

        A modality's whole unimodal branch (encoder and its classifier) forms
        its encoder group. With ``generalized`` every modality gets its own
        label ``enc:<name>`` instead.
        """
        mods = self.config.modalities
        for m in (m1, m2):
            if m not in mods:
                raise ConfigError(f"unknown modality {m!r}; model has {mods}")
        if m1 == m2:
            raise ConfigError("m1 and m2 must differ")
        labels = {}
        for name in self.params:
            head = name.split(".", 1)[0]
            if generalized and head in mods:
                labels[name] = f"enc:{head}"
            elif head == m1:
                labels[name] = "m1"
            elif head == m2:
                labels[name] = "m2"
            else:
                labels[name] = "rest"
        return labels

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].reshape(-1) for k in sorted(self.params)])


# ---------------------------------------------------------------------------
# XDGW checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"XDGW"


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> Path:
    """Write ordered named float64 arrays plus a ``.index`` text sidecar."""
    path = Path(path)
    index_lines = []
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", 1, len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack("<" + "Q" * arr.ndim, *arr.shape))
            fh.write(arr.tobytes())
            index_lines.append(f"{name}\t{','.join(str(s) for s in arr.shape)}")
    path.with_name(path.name + ".index").write_text("\n".join(index_lines) + "\n")
    return path


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an XDGW checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from("<" + "Q" * ndim, raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 8 * size
    return out
