"""Small shared builders for tests."""
import torch

from longroll.diffusion import BackboneConfig
from longroll.history import ConditionPack
from longroll.model import VideoDenoiser

TINY = BackboneConfig(latent_channels=4, latent_size=4, patch=2, dim=16, heads=2, depth=3, controlled=2,
                      max_frames=3, max_history=2)


def tiny_model(seed=0, control=True, cfg=TINY, randomize=True):
    torch.manual_seed(seed)
    m = VideoDenoiser(cfg)
    if randomize:
        # zero-initialized gates would make every block the identity
        with torch.no_grad():
            for name, p in m.base.named_parameters():
                if p.abs().sum() == 0:
                    p.normal_(0, 0.05)
    if control:
        m.attach_control()
    return m.double()


def tiny_pack(b=2, frames=None, n_hist=0, seed=0, cfg=TINY, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    f = frames or cfg.max_frames
    c, s = cfg.latent_channels, cfg.latent_size
    r = lambda *shape: torch.randn(*shape, generator=g, dtype=dtype)
    pack = ConditionPack(z_I=r(b, c, s, s), c_D=r(b, f, c, s, s), c_P=r(b, f, c, s, s), frames=f)
    if n_hist:
        pack.z_hist = r(b, n_hist, c, s, s)
        pack.z_hist_in = pack.z_hist + 0.1 * r(b, n_hist, c, s, s)
    return pack
