"""Permutation-equivariant velocity field with hand-written gradients.

The network is PointNet-shaped: a shared per-point encoder, a global
context from max- and mean-pooling over points, and a shared per-point
decoder that sees its own feature, the context and the time embedding::

    h  = mlp3([x, temb])               per point, width H
    g  = [max_n h, mean_n h]           per cloud, width 2H
    v  = mlp3([h, g, temb]) -> 3       per point, last layer zero-initialised

``temb`` is a sinusoidal embedding of local stage time, plus a learned
class embedding when the model is conditional (row ``n_classes`` is the
"no condition" row).

All parameters live in one flat array; named blocks are views into it.
"""

from dataclasses import asdict, dataclass

import numpy as np

from ._validation import as_generator

__all__ = ["Architecture", "VelocityField", "init_model", "time_embedding", "save_checkpoint", "load_checkpoint"]


@dataclass(frozen=True)
class Architecture:
    hidden: int = 64
    time_dim: int = 32
    n_classes: int = 0
    max_freq: float = 100.0

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError(f"hidden width must be positive, got {self.hidden}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError(f"time_dim must be a positive even integer, got {self.time_dim}")
        if self.n_classes < 0:
            raise ValueError(f"n_classes must be >= 0, got {self.n_classes}")
        if not self.max_freq >= 1.0:
            raise ValueError(f"max_freq must be >= 1, got {self.max_freq}")

    def layout(self):
        h, e = self.hidden, self.time_dim
        blocks = []
        if self.n_classes:
            blocks.append(("cond_embed", (self.n_classes + 1, e)))
        blocks += [
            ("enc1_wx", (3, h)), ("enc1_wt", (e, h)), ("enc1_b", (h,)),
            ("enc2_w", (h, h)), ("enc2_b", (h,)),
            ("enc3_w", (h, h)), ("enc3_b", (h,)),
            ("dec1_wh", (h, h)), ("dec1_wg", (2 * h, h)), ("dec1_wt", (e, h)), ("dec1_b", (h,)),
            ("dec2_w", (h, h)), ("dec2_b", (h,)),
            ("out_w", (h, 3)), ("out_b", (3,)),
        ]
        return blocks


def time_embedding(t, dim, max_freq=100.0):
    """Sinusoidal embedding of shape ``t.shape + (dim,)``; frequencies are geometric in [1, max_freq]."""
    t = np.asarray(t, dtype=np.float64)
    freqs = np.geomspace(1.0, max_freq, dim // 2)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


class VelocityField:
    """Velocity model ``v(t, X)`` for one stage.

    Call it as ``field(t, x, condition=None)`` with ``x`` of shape (N, 3) or
    (B, N, 3) and ``t`` a scalar or shape (B,).
    """

    def __init__(self, arch, params=None, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self._layout = []
        offset = 0
        for name, shape in arch.layout():
            size = int(np.prod(shape))
            self._layout.append((name, shape, offset, size))
            offset += size
        self.n_params = offset
        if params is None:
            params = np.zeros(offset, dtype=self.dtype)
        params = np.asarray(params, dtype=self.dtype)
        if params.shape != (offset,):
            raise ValueError(f"expected {offset} parameters, got shape {params.shape}")
        self.params = params.copy()

    @property
    def layout(self):
        """``(name, shape)`` for each parameter block, in storage order."""
        return [(name, shape) for name, shape, _, _ in self._layout]

    def blocks(self, flat=None):
        flat = self.params if flat is None else flat
        return {
            name: flat[off:off + size].reshape(shape) for name, shape, off, size in self._layout
        }

    def copy(self, params=None, dtype=None):
        return VelocityField(self.arch, self.params if params is None else params, dtype or self.dtype)

    # forward / backward

    def _prepare(self, t, x, condition):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != 3:
            raise ValueError(f"expected points of shape (N, 3) or (B, N, 3), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("input cloud contains non-finite values")
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        temb = time_embedding(t, self.arch.time_dim, self.arch.max_freq).astype(self.dtype)
        cidx = None
        if self.arch.n_classes:
            null = self.arch.n_classes
            if condition is None:
                cidx = np.full(b, null, dtype=np.intp)
            else:
                cidx = np.broadcast_to(np.asarray(condition, dtype=np.intp), (b,)).copy()
                if np.any((cidx < 0) | (cidx >= null)):
                    raise ValueError(f"condition must be in [0, {null}), got {condition!r}")
            temb = temb + self.blocks()["cond_embed"][cidx]
        elif condition is not None:
            raise ValueError("condition given to an unconditional model")
        return x, single, temb, cidx

    def _forward(self, x, temb):
        p = self.blocks()
        c = {"x": x, "temb": temb}
        a1 = x @ p["enc1_wx"] + (temb @ p["enc1_wt"] + p["enc1_b"])[:, None, :]
        h1, s1 = _silu(a1)
        a2 = h1 @ p["enc2_w"] + p["enc2_b"]
        h2, s2 = _silu(a2)
        a3 = h2 @ p["enc3_w"] + p["enc3_b"]
        f, s3 = _silu(a3)
        imax = np.argmax(f, axis=1)
        gmax = np.take_along_axis(f, imax[:, None, :], axis=1)[:, 0, :]
        gmean = f.mean(axis=1)
        g = np.concatenate([gmax, gmean], axis=-1)
        a4 = f @ p["dec1_wh"] + (g @ p["dec1_wg"] + temb @ p["dec1_wt"] + p["dec1_b"])[:, None, :]
        h4, s4 = _silu(a4)
        a5 = h4 @ p["dec2_w"] + p["dec2_b"]
        h5, s5 = _silu(a5)
        out = h5 @ p["out_w"] + p["out_b"]
        c.update(a1=a1, s1=s1, h1=h1, a2=a2, s2=s2, h2=h2, a3=a3, s3=s3, f=f,
                 imax=imax, g=g, a4=a4, s4=s4, h4=h4, a5=a5, s5=s5, h5=h5)
        return out, c

    def _backward(self, dout, c, cidx):
        p = self.blocks()
        grad = np.zeros(self.n_params, dtype=self.dtype)
        gb = self.blocks(grad)
        bsz, n, _ = dout.shape
        hdim = self.arch.hidden

        def wgrad(inp, d):
            return inp.reshape(-1, inp.shape[-1]).T @ d.reshape(-1, d.shape[-1])

        gb["out_w"][...] = wgrad(c["h5"], dout)
        gb["out_b"][...] = dout.sum(axis=(0, 1))
        da5 = (dout @ p["out_w"].T) * _silu_grad(c["a5"], c["s5"])
        gb["dec2_w"][...] = wgrad(c["h4"], da5)
        gb["dec2_b"][...] = da5.sum(axis=(0, 1))
        da4 = (da5 @ p["dec2_w"].T) * _silu_grad(c["a4"], c["s4"])
        gb["dec1_wh"][...] = wgrad(c["f"], da4)
        s4 = da4.sum(axis=1)
        gb["dec1_wg"][...] = c["g"].T @ s4
        gb["dec1_wt"][...] = c["temb"].T @ s4
        gb["dec1_b"][...] = s4.sum(axis=0)
        dg = s4 @ p["dec1_wg"].T
        dtemb = s4 @ p["dec1_wt"].T

        df = da4 @ p["dec1_wh"].T + (dg[:, None, hdim:] / n)
        bi, hi = np.meshgrid(np.arange(bsz), np.arange(hdim), indexing="ij")
        df[bi, c["imax"], hi] += dg[:, :hdim]

        da3 = df * _silu_grad(c["a3"], c["s3"])
        gb["enc3_w"][...] = wgrad(c["h2"], da3)
        gb["enc3_b"][...] = da3.sum(axis=(0, 1))
        da2 = (da3 @ p["enc3_w"].T) * _silu_grad(c["a2"], c["s2"])
        gb["enc2_w"][...] = wgrad(c["h1"], da2)
        gb["enc2_b"][...] = da2.sum(axis=(0, 1))
        da1 = (da2 @ p["enc2_w"].T) * _silu_grad(c["a1"], c["s1"])
        gb["enc1_wx"][...] = wgrad(c["x"], da1)
        s1 = da1.sum(axis=1)
        gb["enc1_wt"][...] = c["temb"].T @ s1
        gb["enc1_b"][...] = s1.sum(axis=0)
        dtemb = dtemb + s1 @ p["enc1_wt"].T
        if cidx is not None:
            np.add.at(gb["cond_embed"], cidx, dtemb)
        return grad

    def __call__(self, t, x, condition=None):
        x, single, temb, _ = self._prepare(t, x, condition)
        out, _ = self._forward(x, temb)
        return out[0] if single else out

    def loss_and_grad(self, t, x, target, condition=None):
        """Mean squared error against ``target`` and its gradient w.r.t. the flat parameters."""
        x, single, temb, cidx = self._prepare(t, x, condition)
        target = np.asarray(target, dtype=self.dtype)
        if single:
            target = target[None]
        if target.shape != x.shape:
            raise ValueError(f"target shape {target.shape} does not match input shape {x.shape}")
        out, cache = self._forward(x, temb)
        resid = out - target
        loss = float(np.mean(resid.astype(np.float64) ** 2))
        dout = (2.0 / resid.size) * resid
        return loss, self._backward(dout, cache, cidx)


def init_model(arch, rng=None, dtype=np.float32):
    """Fan-in scaled uniform weights, zero biases, zero output layer.

    The zero output layer makes a fresh model the identically-zero field.
    """
    rng = as_generator(rng)
    model = VelocityField(arch, dtype=dtype)
    blocks = model.blocks()
    h, e = arch.hidden, arch.time_dim
    fan_in = {
        "enc1_wx": 3 + e, "enc1_wt": 3 + e,
        "enc2_w": h, "enc3_w": h,
        "dec1_wh": 3 * h + e, "dec1_wg": 3 * h + e, "dec1_wt": 3 * h + e,
        "dec2_w": h,
        "cond_embed": 1,
    }
    for name, _ in model.layout:
        if name in fan_in:
            limit = np.sqrt(3.0 / fan_in[name])
            if name == "cond_embed":
                limit = 0.1
            blocks[name][...] = rng.uniform(-limit, limit, size=blocks[name].shape)
    return model


# checkpoints

_MAGIC = "msflow-checkpoint 1"


def save_checkpoint(path, model, ema_params=None, meta=None):
    """Write a text manifest followed by little-endian float32 blocks.

    The manifest lists the architecture, ``meta`` entries and one line per
    parameter block for the live set and (if given) the EMA set, in the
    order the raw data follows.
    """
    lines = [_MAGIC]
    for key, value in asdict(model.arch).items():
        lines.append(f"arch.{key} = {value}")
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key} = {value}")
    sets = [("live", model.params)]
    if ema_params is not None:
        sets.append(("ema", ema_params))
    for set_name, _ in sets:
        for name, shape in model.layout:
            lines.append(f"block = {set_name}/{name} {'x'.join(map(str, shape))}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for _, flat in sets:
            fh.write(np.asarray(flat, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Return ``(live_model, ema_model_or_None, meta)`` from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"\nend\n"
    pos = raw.find(marker)
    if not raw.startswith(_MAGIC.encode()) or pos < 0:
        raise ValueError(f"{path}: not an msflow checkpoint")
    header = raw[:pos].decode("ascii").splitlines()[1:]
    body = raw[pos + len(marker):]
    arch_kw, meta, blocks = {}, {}, []
    for line in header:
        key, _, value = (part.strip() for part in line.partition("="))
        if key.startswith("arch."):
            arch_kw[key[5:]] = value
        elif key.startswith("meta."):
            meta[key[5:]] = value
        elif key == "block":
            blocks.append(value.split()[0])
    arch = Architecture(
        hidden=int(arch_kw["hidden"]),
        time_dim=int(arch_kw["time_dim"]),
        n_classes=int(arch_kw["n_classes"]),
        max_freq=float(arch_kw["max_freq"]),
    )
    model = VelocityField(arch, dtype=dtype)
    data = np.frombuffer(body, dtype="<f4")
    n_sets = len({b.split("/")[0] for b in blocks})
    if data.size != n_sets * model.n_params:
        raise ValueError(f"{path}: expected {n_sets * model.n_params} floats, found {data.size}")
    live = model.copy(data[: model.n_params])
    ema = model.copy(data[model.n_params:]) if n_sets == 2 else None
    return live, ema, meta
