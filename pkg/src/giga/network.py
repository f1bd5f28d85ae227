"""Tri-plane grasp affordance and occupancy network.

A TSDF volume is lifted to per-voxel features by one 3D convolution,
averaged along each workspace axis onto three canonical feature planes
(xy, yz, xz), and inpainted by three independent 2D U-Nets.  Query
points gather a local feature by bilinear interpolation on each plane;
small fully-connected ResNet decoders map (normalized point, feature)
to grasp quality, orientation, opening width and occupancy.
"""

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .scene import WORKSPACE_SIZE
from .tsdf import ConfigMismatch, TsdfGrid

AFFORDANCE_HEADS = ("quality", "rotation", "width")
HEAD_WIDTHS = {"quality": 1, "rotation": 4, "width": 1, "occupancy": 1}


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    voxel_channels: int = 16
    plane_resolution: int = 40
    plane_channels: int = 32
    unet_depth: int = 3
    decoder_hidden: int = 64
    decoder_blocks: int = 3
    max_width: float = 0.08
    workspace_size: float = WORKSPACE_SIZE

    def __post_init__(self):
        for f in ("voxel_channels", "plane_resolution", "plane_channels",
                  "unet_depth", "decoder_hidden", "decoder_blocks"):
            if getattr(self, f) < 1:
                raise ValueError("%s must be >= 1" % f)
        if self.plane_resolution % (2 ** self.unet_depth) != 0:
            raise ValueError("plane resolution %d not divisible by 2^%d"
                             % (self.plane_resolution, self.unet_depth))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _unet_channels(cfg):
    return [cfg.plane_channels * (2 ** d) for d in range(cfg.unet_depth + 1)]


class GigaNet:
    """Parameter container plus the forward passes.

    Parameters live in a flat name -> Parameter dict so the optimizer
    and the checkpoint format stay trivial.
    """

    def __init__(self, config=None, seed=0):
        self.config = config or NetworkConfig()
        self.params = {}
        self._init_params(np.random.default_rng(seed))

    def _add(self, name, arr):
        self.params[name] = Parameter(arr)
        return self.params[name]

    def _init_params(self, rng):
        cfg = self.config
        c0 = cfg.voxel_channels
        self._add("enc3d.w", _he(rng, (3, 3, 3, 1, c0), 27))
        self._add("enc3d.b", np.zeros(c0))
        chans = _unet_channels(cfg)
        for plane in ("xy", "yz", "xz"):
            cin = c0
            for d, cout in enumerate(chans):
                self._add("unet.%s.down%d.w" % (plane, d),
                          _he(rng, (3, 3, cin, cout), 9 * cin))
                self._add("unet.%s.down%d.b" % (plane, d), np.zeros(cout))
                cin = cout
            for d in range(cfg.unet_depth - 1, -1, -1):
                cin = chans[d + 1] + chans[d]
                self._add("unet.%s.up%d.w" % (plane, d),
                          _he(rng, (3, 3, cin, chans[d]), 9 * cin))
                self._add("unet.%s.up%d.b" % (plane, d), np.zeros(chans[d]))
        for head in HEAD_WIDTHS:
            self._init_decoder(head, rng)

    def _init_decoder(self, head, rng):
        cfg = self.config
        feat = 3 + 3 * cfg.plane_channels
        hid = cfg.decoder_hidden
        width = HEAD_WIDTHS[head]
        p = "dec.%s" % head
        self._add(p + ".in.w", _he(rng, (feat, hid), feat))
        self._add(p + ".in.b", np.zeros(hid))
        for i in range(cfg.decoder_blocks):
            self._add("%s.block%d.w1" % (p, i), _he(rng, (hid, hid), hid))
            self._add("%s.block%d.b1" % (p, i), np.zeros(hid))
            self._add("%s.block%d.w2" % (p, i), _he(rng, (hid, hid), hid))
            self._add("%s.block%d.b2" % (p, i), np.zeros(hid))
        self._add(p + ".out.w", _he(rng, (hid, width), hid))
        bias = np.zeros(width)
        if head == "rotation":
            bias[0] = 1.0  # start near the identity quaternion
        self._add(p + ".out.b", bias)

    def reinit_decoder(self, head, seed=0):
        """Replace one decoder head with fresh parameters."""
        if head not in HEAD_WIDTHS:
            raise ValueError("unknown decoder head %r" % (head,))
        self._init_decoder(head, np.random.default_rng(seed))

    def set_encoder_trainable(self, flag):
        """Toggle gradients for the conv encoder and the plane U-Nets."""
        for name, p in self.params.items():
            if name.startswith(("enc3d.", "unet.")):
                p.requires_grad = bool(flag)

    # ------------------------------------------------------------ encoder

    def _as_volume(self, tsdf):
        if isinstance(tsdf, TsdfGrid):
            vals = tsdf.values[None]
        else:
            vals = np.asarray(tsdf, dtype=np.float64)
            if vals.ndim == 3:
                vals = vals[None]
        n = self.config.plane_resolution
        if vals.shape[1:] != (n, n, n):
            raise ConfigMismatch("TSDF shape %r does not match plane resolution %d"
                                 % (vals.shape[1:], n))
        return Tensor(vals[..., None])

    def project_features(self, tsdf):
        """Pre-U-Net feature planes: 3D conv then mean along one axis.

        Volume axes are [B, x, y, z, C]; the xy plane averages over z,
        yz over x, xz over y, so plane rows/cols follow axis order.
        """
        x = self._as_volume(tsdf)
        v = ad.relu(ad.conv3d(x, self.params["enc3d.w"],
                              self.params["enc3d.b"]))
        return (ad.project_mean(v, 3),
                ad.project_mean(v, 1),
                ad.project_mean(v, 2))

    def _unet(self, plane, h):
        cfg = self.config
        skips = []
        for d in range(cfg.unet_depth + 1):
            if d > 0:
                h = ad.max_pool2d(h)
            h = ad.relu(ad.conv2d(
                h, self.params["unet.%s.down%d.w" % (plane, d)],
                self.params["unet.%s.down%d.b" % (plane, d)]))
            skips.append(h)
        for d in range(cfg.unet_depth - 1, -1, -1):
            h = ad.concat((ad.nearest_upsample2d(h), skips[d]), axis=3)
            h = ad.relu(ad.conv2d(
                h, self.params["unet.%s.up%d.w" % (plane, d)],
                self.params["unet.%s.up%d.b" % (plane, d)]))
        return h

    def encode(self, tsdf):
        """TSDF -> (c_xy, c_yz, c_xz) feature planes, each [B,R,R,C]."""
        pre_xy, pre_yz, pre_xz = self.project_features(tsdf)
        return (self._unet("xy", pre_xy),
                self._unet("yz", pre_yz),
                self._unet("xz", pre_xz))

    # ------------------------------------------------------------ queries

    def _normalized(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
        return pts / self.config.workspace_size

    def query_feature(self, planes, points):
        """Concatenated bilinear features at points [B,M,3] (meters)."""
        pn = self._normalized(points)
        c_xy, c_yz, c_xz = planes
        f_xy = ad.plane_sample(c_xy, pn[..., (0, 1)])
        f_yz = ad.plane_sample(c_yz, pn[..., (1, 2)])
        f_xz = ad.plane_sample(c_xz, pn[..., (0, 2)])
        return ad.concat((f_xy, f_yz, f_xz), axis=2)

    def _decoder_input(self, feat, points):
        pn = np.clip(self._normalized(points), 0.0, 1.0)
        b, m, c = feat.shape
        rows = ad.reshape(feat, (b * m, c))
        coords = Tensor(pn.reshape(b * m, 3))
        return ad.concat((coords, rows), axis=1)

    def _mlp(self, head, x):
        cfg = self.config
        p = "dec.%s" % head
        h = ad.linear(x, self.params[p + ".in.w"], self.params[p + ".in.b"])
        for i in range(cfg.decoder_blocks):
            t = ad.linear(ad.relu(h), self.params["%s.block%d.w1" % (p, i)],
                          self.params["%s.block%d.b1" % (p, i)])
            t = ad.linear(ad.relu(t), self.params["%s.block%d.w2" % (p, i)],
                          self.params["%s.block%d.b2" % (p, i)])
            h = ad.add(h, t)
        return ad.linear(ad.relu(h), self.params[p + ".out.w"],
                         self.params[p + ".out.b"])

    def decode_affordance(self, feat, points):
        """-> (quality [N,1], rotation [N,4] unit rows, width [N,1] meters)."""
        x = self._decoder_input(feat, points)
        q = ad.sigmoid(self._mlp("quality", x))
        r = ad.normalize_rows(self._mlp("rotation", x))
        w = ad.scale(ad.sigmoid(self._mlp("width", x)), self.config.max_width)
        return q, r, w

    def decode_occupancy(self, feat, points):
        """-> occupancy probability [N,1]."""
        return ad.sigmoid(self._mlp("occupancy",
                                    self._decoder_input(feat, points)))

    def forward_joint(self, tsdf, grasp_points, occ_points):
        """One encode, then both decoder families.

        Returns ((quality, rotation, width), occupancy) with row counts
        B*M_grasp and B*M_occ respectively.
        """
        planes = self.encode(tsdf)
        aff = self.decode_affordance(
            self.query_feature(planes, grasp_points), grasp_points)
        occ = self.decode_occupancy(
            self.query_feature(planes, occ_points), occ_points)
        return aff, occ

    # ------------------------------------------------------- persistence

    def save(self, path, meta=None):
        doc = {"config": self.config.to_dict()}
        if meta:
            doc.update(meta)
        ad.save_checkpoint(path, self.params, meta=doc)

    @classmethod
    def load(cls, path):
        arrays, meta = ad.load_checkpoint(path)
        net = cls(NetworkConfig.from_dict(meta["config"]))
        if set(arrays) != set(net.params):
            raise ConfigMismatch("checkpoint parameters do not match config")
        for name, arr in arrays.items():
            if net.params[name].data.shape != arr.shape:
                raise ConfigMismatch(
                    "checkpoint shape %r vs %r for %s"
                    % (arr.shape, net.params[name].data.shape, name))
            net.params[name].data = arr.copy()
        return net, meta
