"""Detection network: VFE layers, submanifold sparse 3D convolution, BEV
densification, 2D conv trunk, and the three heads (class, box, direction).

Built on the minimal autodiff core; all parameters are 64-bit floats in a
ParamStore with deterministic, seeded He-style initialization.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, Tensor, concat, conv2d, masked_max
from .voxel import VOXEL_DIM, GridConfig, SparseTensor, VoxelBatch


@dataclass(frozen=True)
class NetConfig:
    in_features: int = VOXEL_DIM
    vfe1_channels: int = 16
    vfe2_channels: int = 32
    sparse_channels: tuple = (32, 32)
    trunk_channels: int = 64
    trunk_blocks: int = 3
    init_seed: int = 0


@dataclass
class NetworkOutput:
    """Per-BEV-cell, per-anchor raw head outputs (pre-sigmoid scores)."""

    cls: Tensor  # [ny, nx, 2]
    reg: Tensor  # [ny, nx, 2, 7]
    dir: Tensor  # [ny, nx, 2]


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_params(cfg: NetConfig, grid: GridConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.init_seed)
    p = ParamStore()
    p.add("vfe1.w", _he(rng, (cfg.in_features, cfg.vfe1_channels), cfg.in_features))
    p.add("vfe1.b", np.zeros(cfg.vfe1_channels))
    c2in = 2 * cfg.vfe1_channels
    p.add("vfe2.w", _he(rng, (c2in, cfg.vfe2_channels), c2in))
    p.add("vfe2.b", np.zeros(cfg.vfe2_channels))
    cin = cfg.vfe2_channels
    for i, cout in enumerate(cfg.sparse_channels):
        p.add(f"sconv{i}.k", _he(rng, (3, 3, 3, cin, cout), 27 * cin))
        p.add(f"sconv{i}.b", np.zeros(cout))
        cin = cout
    bev_in = cin * grid.nz
    tin = bev_in
    for i in range(cfg.trunk_blocks):
        p.add(f"trunk{i}.k", _he(rng, (3, 3, tin, cfg.trunk_channels), 9 * tin))
        p.add(f"trunk{i}.b", np.zeros(cfg.trunk_channels))
        tin = cfg.trunk_channels
    p.add("head_cls.k", _he(rng, (1, 1, tin, 2), tin))
    p.add("head_cls.b", np.zeros(2))
    p.add("head_reg.k", _he(rng, (1, 1, tin, 14), tin))
    p.add("head_reg.b", np.zeros(14))
    p.add("head_dir.k", _he(rng, (1, 1, tin, 2), tin))
    p.add("head_dir.b", np.zeros(2))
    return p


def vfe_forward(params: ParamStore, voxels, mask) -> Tensor:
    """Two stacked VFE blocks reducing [K, P, F] padded points to [K, C].

    Block 1: per-point linear + ReLU, masked max over points, pooled vector
    concatenated back to every point. Block 2: linear + ReLU, final masked
    max. Padded slots never reach the max.
    """
    mask = np.asarray(mask, dtype=bool)
    if len(mask) and not mask.any(axis=1).all():
        raise ValueError("voxel with zero real points")
    x = voxels if isinstance(voxels, Tensor) else Tensor(voxels)
    K, P, _ = x.data.shape

    h = (x @ params["vfe1.w"] + params["vfe1.b"]).relu()
    pooled = masked_max(h, mask, axis=1)  # [K, C1]
    tiled = pooled.reshape(K, 1, -1) * Tensor(np.ones((1, P, 1)))
    h = concat([h, tiled], axis=2)
    # padded slots carry garbage after the concat; the mask keeps them out
    h = (h @ params["vfe2.w"] + params["vfe2.b"]).relu()
    return masked_max(h, mask, axis=1)


def _neighbor_pairs(coords: np.ndarray):
    """For each of the 27 offsets, index pairs (out_row, in_row) of active
    sites whose neighbor at that offset is also active."""
    index = {tuple(c): i for i, c in enumerate(coords.tolist())}
    pairs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                out_rows = []
                in_rows = []
                for i, c in enumerate(coords.tolist()):
                    nb = (c[0] + dx, c[1] + dy, c[2] + dz)
                    j = index.get(nb)
                    if j is not None:
                        out_rows.append(i)
                        in_rows.append(j)
                pairs.append((dx, dy, dz, np.array(out_rows, dtype=np.intp),
                              np.array(in_rows, dtype=np.intp)))
    return pairs


def submanifold_conv3d(sp: SparseTensor, kernel: Tensor, bias: Tensor,
                       apply_relu: bool = True) -> SparseTensor:
    """3x3x3 sparse convolution whose output active set equals the input's.

    At each active site the sum runs only over active neighbors; empty
    sites contribute nothing and stay empty.
    """
    if kernel.data.shape[:3] != (3, 3, 3):
        raise ValueError("kernel must be 3x3x3")
    feats = sp.features if isinstance(sp.features, Tensor) else Tensor(sp.features)
    K = len(sp.coords)
    cout = kernel.data.shape[4]
    if K == 0:
        return SparseTensor(sp.coords, Tensor(np.zeros((0, cout))))
    out = Tensor(np.zeros((K, cout)))
    for dx, dy, dz, out_rows, in_rows in _neighbor_pairs(sp.coords):
        if len(out_rows) == 0:
            continue
        k_mat = _slice3(kernel, dx + 1, dy + 1, dz + 1)
        out = out + (feats.take_rows(in_rows) @ k_mat).scatter_rows(out_rows, K)
    out = out + bias
    if apply_relu:
        out = out.relu()
    return SparseTensor(sp.coords, out)


def _slice3(kernel: Tensor, i, j, k):
    """Differentiable [Cin, Cout] slice of a [3,3,3,Cin,Cout] kernel."""
    cin, cout = kernel.data.shape[3], kernel.data.shape[4]
    flat = kernel.reshape(27, cin, cout)
    return flat.take_rows([i * 9 + j * 3 + k]).reshape(cin, cout)


def to_bev_dense(sp: SparseTensor, grid: GridConfig) -> Tensor:
    """Scatter a sparse tensor to a dense BEV map, folding z into channels.

    Output shape [ny, nx, nz*C]; site (ix, iy, iz) fills channel block iz
    of cell (iy, ix)."""
    feats = sp.features if isinstance(sp.features, Tensor) else Tensor(sp.features)
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    C = feats.data.shape[1] if feats.data.ndim == 2 else 0
    if len(sp.coords):
        if (sp.coords.min() < 0 or sp.coords[:, 0].max() >= nx
                or sp.coords[:, 1].max() >= ny or sp.coords[:, 2].max() >= nz):
            raise ValueError("sparse coord outside grid")
        rows = (sp.coords[:, 1] * nx + sp.coords[:, 0]) * nz + sp.coords[:, 2]
        dense = feats.scatter_rows(rows, ny * nx * nz)
    else:
        dense = Tensor(np.zeros((ny * nx * nz, C)))
    return dense.reshape(ny, nx, nz * C)


def rvfnet_forward(params: ParamStore, batch: VoxelBatch, net_cfg: NetConfig,
                   grid: GridConfig) -> NetworkOutput:
    """Full forward pass from a voxel batch to the three head outputs."""
    if batch.features.shape[2] != net_cfg.in_features:
        raise ValueError("voxel feature width does not match network config")
    K = len(batch.coords)
    if K:
        vfeat = vfe_forward(params, batch.features, batch.mask)
        sp = SparseTensor(batch.coords, vfeat)
        for i in range(len(net_cfg.sparse_channels)):
            sp = submanifold_conv3d(sp, params[f"sconv{i}.k"], params[f"sconv{i}.b"])
        bev = to_bev_dense(sp, grid)
    else:
        c_last = net_cfg.sparse_channels[-1]
        bev = Tensor(np.zeros((grid.ny, grid.nx, grid.nz * c_last)))
    x = bev
    for i in range(net_cfg.trunk_blocks):
        x = conv2d(x, params[f"trunk{i}.k"], params[f"trunk{i}.b"],
                   stride=1, padding=1).relu()
    cls = conv2d(x, params["head_cls.k"], params["head_cls.b"])
    reg = conv2d(x, params["head_reg.k"], params["head_reg.b"])
    dirh = conv2d(x, params["head_dir.k"], params["head_dir.b"])
    ny, nx = grid.ny, grid.nx
    return NetworkOutput(cls=cls, reg=reg.reshape(ny, nx, 2, 7), dir=dirh)


# ---- checkpoint container ----

_MAGIC = b"RVFCKPT1"


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable config snapshot."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: ParamStore, cfg_hash: str = ""):
    """name -> shape -> little-endian float64 payload, name-sorted."""
    names = params.names()
    header = {
        "config_hash": cfg_hash,
        "tensors": {n: list(params[n].data.shape) for n in names},
    }
    hj = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(hj)))
        f.write(hj)
        for n in names:
            f.write(params[n].data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (state_dict, config_hash)."""
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        state = {}
        for n in sorted(header["tensors"]):
            shape = tuple(header["tensors"][n])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            state[n] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return state, header["config_hash"]
