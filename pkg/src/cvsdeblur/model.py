"""STGDNet: blurred RGB + spatial/temporal differences -> sharp RGB.

Data flow for one exposure with ``N - 1`` temporal differences::

    B_enc  = conv3x3(B)
    F_SD   = encode_sd(SD_k)                       # pyramid, once
    R_0    = 0
    for i in 0 .. N-2:
        R'_i    = sam(R_i, B)
        R_{i+1} = trrm_step(R'_i, B_enc, encode_td(TD_i), F_SD)
    D      = B + conv_out(R_{N-1})

``trrm_step`` is a U-shaped encoder/decoder whose encoder stages fuse the TD
and SD features through two cascaded residual cross-attentions (CCF).  All
recurrent steps share one set of weights, so the same parameters serve any
sequence length.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .sensor import CVSSample, dequantize
from .tensor import Tensor


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 16
    n_scales: int = 3
    leaky_slope: float = 0.1
    rgb_channels_in: int = 3
    sd_channels_in: int = 2
    td_channels_in: int = 1
    use_sd: bool = True
    use_td: bool = True
    use_ccf: bool = True
    use_trrm: bool = True
    attention: str = "channel"
    init_seed: int = 0

    def __post_init__(self):
        if self.n_scales < 2:
            raise ValueError("n_scales must be at least 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.attention not in ("spatial", "channel"):
            raise ValueError(f"unknown attention mode {self.attention!r}")

    def width(self, j: int) -> int:
        return self.base_channels * 2 ** j

    @property
    def multiple(self) -> int:
        return 2 ** (self.n_scales - 1)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


ABLATIONS = {
    "full": {},
    "no-sd": {"use_sd": False},
    "no-td": {"use_td": False},
    "rgb-only": {"use_sd": False, "use_td": False},
    "no-ccf": {"use_ccf": False},
    "no-trrm": {"use_trrm": False},
}


def ablate(arch: ArchConfig, use_sd: bool | None = None, use_td: bool | None = None,
           use_ccf: bool | None = None, use_trrm: bool | None = None) -> ArchConfig:
    """Return ``arch`` with the given modality/module switches overridden."""
    flags = {k: v for k, v in dict(use_sd=use_sd, use_td=use_td, use_ccf=use_ccf,
                                   use_trrm=use_trrm).items() if v is not None}
    return replace(arch, **flags)


def _to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def _from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    b, _, c = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, c, h, w))


class STGDNet:
    """Parameters plus the forward computation.

    ``params`` maps unique names to leaf tensors.  Each convolution ``name``
    owns ``name.weight`` and ``name.bias``.
    """

    def __init__(self, arch: ArchConfig = ArchConfig(), params: dict[str, Tensor] | None = None,
                 dtype=np.float32):
        self.arch = arch
        if params is None:
            params = init_params(arch, dtype=dtype)
        self.params = params

    # ------------------------------------------------------------ plumbing
    def conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return T.conv2d(x, self.params[name + ".weight"], self.params[name + ".bias"], stride)

    def act(self, x: Tensor) -> Tensor:
        return T.leaky_relu(x, self.arch.leaky_slope)

    def res_block(self, x: Tensor, name: str) -> Tensor:
        return x + self.conv(self.act(self.conv(x, name + ".c1")), name + ".c2")

    def with_params(self, params: dict[str, Tensor]) -> "STGDNet":
        return STGDNet(self.arch, params)

    def ablated(self, **flags) -> "STGDNet":
        """Variant sharing this model's weights; flags must not need new parameters."""
        arch = ablate(self.arch, **flags)
        needed = set(param_shapes(arch))
        missing = needed - set(self.params)
        if missing:
            raise ValueError(f"ablation needs parameters this model lacks: {sorted(missing)[:3]}")
        return STGDNet(arch, {k: self.params[k] for k in param_shapes(arch)})

    def _check_extent(self, x: Tensor) -> None:
        m = self.arch.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"spatial extent {x.shape[2:]} not padded to a multiple of {m}")

    # ------------------------------------------------------------ encoders
    def _encode(self, x: Tensor, prefix: str) -> list[Tensor]:
        self._check_extent(x)
        h = self.act(self.conv(x, prefix + ".stem"))
        feats = []
        for j in range(self.arch.n_scales):
            if j:
                h = self.act(self.conv(h, f"{prefix}.s{j}.down", stride=2))
            h = self.res_block(h, f"{prefix}.s{j}")
            feats.append(self.conv(h, f"{prefix}.s{j}.proj"))
        return feats

    def encode_sd(self, sd: Tensor) -> list[Tensor]:
        """Feature pyramid of a dequantized SD frame ``[B, 2, H, W]``."""
        return self._encode(sd, "sd_enc")

    def encode_td(self, td: Tensor) -> list[Tensor]:
        """Feature pyramid of a dequantized TD frame ``[B, 1, H, W]``; shared across steps."""
        return self._encode(td, "td_enc")

    def _zero_pyramid(self, batch: int, h: int, w: int, dtype) -> list[Tensor]:
        return [T.zeros((batch, self.arch.width(j), h >> j, w >> j), dtype)
                for j in range(self.arch.n_scales)]

    # ------------------------------------------------------------ fusion
    def _cross(self, f_q: Tensor, f_kv: Tensor, name: str) -> Tensor:
        bsz, c, h, w = f_q.shape
        q = self.conv(f_q, name + ".q")
        k = self.conv(f_kv, name + ".k")
        v = self.conv(f_kv, name + ".v")
        if self.arch.attention == "channel":
            # tokens are channels, each a flattened h*w map
            flat = (bsz, c, h * w)
            out = T.attention(T.reshape(q, flat), T.reshape(k, flat), T.reshape(v, flat))
            return T.reshape(out, (bsz, c, h, w)) + f_q
        out = T.attention(_to_tokens(q), _to_tokens(k), _to_tokens(v))
        return _from_tokens(out, h, w) + f_q

    def ccf_fuse(self, f_enc: Tensor, f_td: Tensor, f_sd: Tensor, j: int) -> Tensor:
        """Inject TD (motion) then SD (structure) into encoder features at scale ``j``.

        Each stage is a single-head attention with queries from the running
        feature and keys/values from the modality, added back to its query
        input.  ``arch.attention`` picks the token set: ``"channel"`` attends
        across channels (tokens are whole ``h*w`` maps, so modality features
        stay spatially aligned), ``"spatial"`` across all ``h*w`` positions
        with ``d_k = C``.
        """
        if not (f_enc.shape == f_td.shape == f_sd.shape):
            raise ValueError(f"ccf shape mismatch: {f_enc.shape} {f_td.shape} {f_sd.shape}")
        f_tilde = self._cross(f_enc, f_td, f"trrm.ccf{j}.td")
        return self._cross(f_tilde, f_sd, f"trrm.ccf{j}.sd")

    def concat_fuse(self, f_enc: Tensor, f_td: Tensor, f_sd: Tensor, j: int) -> Tensor:
        """Fusion used when CCF is ablated: channel concat and two 3x3 convs."""
        x = T.concat([f_enc, f_td, f_sd], axis=1)
        return self.conv(self.act(self.conv(x, f"trrm.cat{j}.c1")), f"trrm.cat{j}.c2")

    def sam(self, r: Tensor, b: Tensor) -> Tensor:
        """Gate ``r`` with a sigmoid map conditioned on the blurred frame."""
        if r.shape[0] != b.shape[0] or r.shape[2:] != b.shape[2:]:
            raise ValueError(f"sam shape mismatch: {r.shape} vs {b.shape}")
        a = T.sigmoid(self.conv(self.conv(r, "sam.c2") + b, "sam.c3"))
        return r + self.conv(r, "sam.c1") * a

    # ------------------------------------------------------------ recurrence
    def trrm_step(self, r_prime: Tensor, b_enc: Tensor, td_pyr: Sequence[Tensor],
                  sd_pyr: Sequence[Tensor]) -> Tensor:
        n = self.arch.n_scales
        if len(td_pyr) != n or len(sd_pyr) != n:
            raise ValueError(f"pyramid depth {len(td_pyr)}/{len(sd_pyr)} != n_scales {n}")
        if r_prime.shape != b_enc.shape:
            raise ValueError(f"r_prime {r_prime.shape} vs b_enc {b_enc.shape}")
        fuse = self.ccf_fuse if self.arch.use_ccf else self.concat_fuse
        e = self.conv(T.concat([r_prime, b_enc], axis=1), "trrm.entry")
        skips = []
        for j in range(n):
            if j:
                e = self.act(self.conv(e, f"trrm.enc{j}.down", stride=2))
            e = self.res_block(e, f"trrm.enc{j}")
            e = fuse(e, td_pyr[j], sd_pyr[j], j)
            skips.append(e)
        g = skips[-1]
        for j in reversed(range(n - 1)):
            u = self.act(self.conv(T.upsample_nearest(g), f"trrm.dec{j}.up"))
            g = self.act(self.conv(T.concat([u, skips[j]], axis=1), f"trrm.dec{j}.fuse"))
        return g

    def forward(self, b: Tensor, sd: Tensor, tds: Sequence[Tensor], clamp: bool = True) -> Tensor:
        """Restore ``b`` ``[B,3,H,W]`` aligned with ``sd``, using every TD in ``tds``.

        With ``clamp=False`` the raw residual output is returned (training).
        """
        if len(tds) == 0:
            raise ValueError("forward needs at least one TD frame")
        self._check_extent(b)
        batch, _, h, w = b.shape
        arch = self.arch
        b_enc = self.conv(b, "rgb_embed")
        sd_pyr = self.encode_sd(sd) if arch.use_sd else self._zero_pyramid(batch, h, w, b.dtype)
        steps = list(tds) if arch.use_trrm else [tds[(len(tds) - 1) // 2]]
        r = T.zeros((batch, arch.base_channels, h, w), b.dtype)
        for td in steps:
            r_prime = self.sam(r, b)
            td_pyr = self.encode_td(td) if arch.use_td else self._zero_pyramid(batch, h, w, b.dtype)
            r = self.trrm_step(r_prime, b_enc, td_pyr, sd_pyr)
        d = b + self.conv(r, "conv_out")
        return T.clip(d, 0.0, 1.0) if clamp else d

    def forward_at(self, b: Tensor, sd_seq: Sequence[Tensor], tds: Sequence[Tensor], k: int,
                   clamp: bool = True) -> Tensor:
        """Restore the intra-exposure slice aligned with ``sd_seq[k]``."""
        if not 0 <= k < len(sd_seq):
            raise IndexError(f"k={k} outside [0, {len(sd_seq) - 1}]")
        return self.forward(b, sd_seq[k], tds, clamp=clamp)

    # ------------------------------------------------------------ numpy convenience
    def restore(self, sample: CVSSample, k: int | None = None, td_seq=None) -> np.ndarray:
        """Inference on one sample; returns an ``(H, W, 3)`` float32 frame in [0, 1]."""
        k = sample.exposure.mid_index if k is None else k
        if not 0 <= k < sample.N:
            raise IndexError(f"k={k} outside [0, {sample.N - 1}]")
        b, sd, tds = prepare_inputs([sample], self.arch.multiple, k=k, td_seq=td_seq)
        with T.no_grad():
            out = self.forward(Tensor(b), Tensor(sd), [Tensor(t) for t in tds])
        return out.data[0, :, : sample.height, : sample.width].transpose(1, 2, 0).copy()


def _pad_reflect(x: np.ndarray, multiple: int) -> np.ndarray:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="reflect")


def prepare_inputs(samples: Sequence[CVSSample], multiple: int, k: int | None = None,
                   td_seq=None):
    """Stack samples into NCHW float32 arrays, reflect-padded to ``multiple``.

    Returns ``(b, sd, tds)``; ``sd`` is the dequantized SD at index ``k``
    (default: each sample's ``gt_index``) and ``tds`` a list of ``N - 1`` arrays.
    ``td_seq`` overrides the TD stack of a single sample.
    """
    ns = {s.N for s in samples}
    if len(ns) != 1:
        raise ValueError(f"batch mixes sequence lengths {sorted(ns)}")
    b = np.stack([s.blur.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    sd = np.stack([dequantize(s.sd_seq[s.gt_index if k is None else k]).transpose(2, 0, 1)
                   for s in samples])
    td_stacks = [s.td_seq if td_seq is None else td_seq for s in samples]
    tds = [np.stack([dequantize(t[i])[None] for t in td_stacks])
           for i in range(len(td_stacks[0]))]
    return (_pad_reflect(b, multiple), _pad_reflect(sd, multiple),
            [_pad_reflect(t, multiple) for t in tds])


# ---------------------------------------------------------------- parameters

def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor for ``arch``."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k):
        shapes[name + ".weight"] = (cout, cin, k, k)
        shapes[name + ".bias"] = (cout,)

    c = arch.width
    n = arch.n_scales
    for prefix, cin, on in (("sd_enc", arch.sd_channels_in, arch.use_sd),
                            ("td_enc", arch.td_channels_in, arch.use_td)):
        if not on:
            continue
        conv(prefix + ".stem", cin, c(0), 3)
        for j in range(n):
            if j:
                conv(f"{prefix}.s{j}.down", c(j - 1), c(j), 3)
            conv(f"{prefix}.s{j}.c1", c(j), c(j), 3)
            conv(f"{prefix}.s{j}.c2", c(j), c(j), 3)
            conv(f"{prefix}.s{j}.proj", c(j), c(j), 1)
    conv("rgb_embed", arch.rgb_channels_in, c(0), 3)
    conv("trrm.entry", 2 * c(0), c(0), 1)
    for j in range(n):
        if j:
            conv(f"trrm.enc{j}.down", c(j - 1), c(j), 3)
        conv(f"trrm.enc{j}.c1", c(j), c(j), 3)
        conv(f"trrm.enc{j}.c2", c(j), c(j), 3)
        if arch.use_ccf:
            for mod in ("td", "sd"):
                for p in ("q", "k", "v"):
                    conv(f"trrm.ccf{j}.{mod}.{p}", c(j), c(j), 1)
        else:
            conv(f"trrm.cat{j}.c1", 3 * c(j), c(j), 3)
            conv(f"trrm.cat{j}.c2", c(j), c(j), 3)
    for j in reversed(range(n - 1)):
        conv(f"trrm.dec{j}.up", c(j + 1), c(j), 3)
        conv(f"trrm.dec{j}.fuse", 2 * c(j), c(j), 3)
    conv("sam.c1", c(0), c(0), 3)
    conv("sam.c2", c(0), arch.rgb_channels_in, 3)
    conv("sam.c3", arch.rgb_channels_in, c(0), 3)
    conv("conv_out", c(0), arch.rgb_channels_in, 3)
    return shapes


def init_params(arch: ArchConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    rng = np.random.default_rng(arch.init_seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def param_groups(names) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for n in names:
        parts = n.split(".")
        key = parts[0] if parts[0] != "trrm" else "trrm." + parts[1].rstrip("0123456789")
        groups.setdefault(key, []).append(n)
    return groups
