import pytest
import torch

from rgbt_sod.blocks import ScoreHead, resample
from rgbt_sod.decoder import MIB, FinalFusion, MIBState, SiameseDecoder
from rgbt_sod.model import ModelConfig, RGBTSaliencyNet


def _pyramids(batch=1, size=64, div=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    ch = {2: 128 // div, 3: 256 // div, 4: 512 // div, 5: 512 // div}
    stride = {2: 4, 3: 8, 4: 16, 5: 16}

    def pyr():
        return {k: torch.randn(batch, c, size // stride[k], size // stride[k], generator=gen)
                for k, c in ch.items()}
    return ch, pyr(), pyr(), torch.randn(batch, 256 // div, size // 16, size // 16, generator=gen)


def test_mib_level3_shapes():
    mib = MIB(256, 256, 256, 128).eval()
    with torch.no_grad():
        z = mib(torch.randn(1, 256, 22, 22), torch.randn(1, 256, 44, 44), torch.randn(1, 256, 22, 22))
    assert z.shape == (1, 128, 44, 44)


def test_level4_upsampling_is_identity():
    x = torch.randn(1, 8, 22, 22)
    assert resample(x, 22, 22) is x
    mib = MIB(16, 8, 8, 4).eval()
    with torch.no_grad():
        m_t, g_t, a_t = mib.cues(torch.randn(1, 16, 22, 22), torch.randn(1, 8, 22, 22), torch.randn(1, 8, 22, 22))
    assert m_t.shape == g_t.shape == a_t.shape == (1, 4, 22, 22)


def test_integration_symmetric_in_summands():
    mib = MIB(16, 8, 8, 4).eval()
    parts = [torch.randn(1, 4, 8, 8) for _ in range(3)]
    with torch.no_grad():
        ref = mib.integrate(*parts)
        assert torch.allclose(ref, mib.integrate(parts[2], parts[0], parts[1]), atol=1e-6)
        assert torch.allclose(ref, mib.integrate(parts[1], parts[2], parts[0]), atol=1e-6)


def test_full_scale_branch_outputs():
    ch = {2: 128, 3: 256, 4: 512, 5: 512}
    dec = SiameseDecoder(ch).eval()
    rgb = {2: torch.randn(1, 128, 88, 88), 3: torch.randn(1, 256, 44, 44),
           4: torch.randn(1, 512, 22, 22), 5: torch.randn(1, 512, 22, 22)}
    t = {k: torch.randn_like(v) for k, v in rgb.items()}
    with torch.no_grad():
        states = dec(rgb, t, torch.randn(1, 256, 22, 22), return_states=True)
    assert [s.level for s in states] == [4, 3, 2]
    assert states[-1].z_rgb.shape == states[-1].z_t.shape == (1, 128, 88, 88)
    assert states[0].z_rgb.shape == (1, 128, 22, 22)


def test_tiny_decoder_shapes():
    ch, r, t, g = _pyramids(batch=2)
    dec = SiameseDecoder(ch, global_channels=32, channels=16).eval()
    with torch.no_grad():
        last = dec(r, t, g)
    assert last.z_rgb.shape == (2, 16, 16, 16)


def test_late_fusion_differs_from_interaction():
    ch, r, t, g = _pyramids()
    torch.manual_seed(1)
    inter = SiameseDecoder(ch, global_channels=32, channels=16).eval()
    torch.manual_seed(1)
    late = SiameseDecoder(ch, global_channels=32, channels=16, modality_interaction=False).eval()
    with torch.no_grad():
        a, b = inter(r, t, g), late(r, t, g)
    assert a.z_rgb.shape == b.z_rgb.shape
    assert not torch.allclose(a.z_rgb, b.z_rgb)


def test_late_fusion_branches_do_not_mix():
    ch, r, t, g = _pyramids()
    dec = SiameseDecoder(ch, global_channels=32, channels=16, modality_interaction=False).eval()
    t2 = {k: torch.randn_like(v) for k, v in t.items()}
    with torch.no_grad():
        assert torch.equal(dec(r, t, g).z_rgb, dec(r, t2, g).z_rgb)


def test_single_decoder_has_one_stream():
    ch, r, t, g = _pyramids()
    dec = SiameseDecoder(ch, global_channels=32, channels=16, single_decoder=True).eval()
    assert dec.branch_parameter_sets() == 1
    with torch.no_grad():
        last = dec(r, t, g)
    assert last.z_t is None and last.z_rgb.shape == (1, 16, 16, 16)


def test_shared_weights_halve_branch_parameters():
    ch, r, t, g = _pyramids()
    sep = SiameseDecoder(ch, global_channels=32, channels=16)
    shared = SiameseDecoder(ch, global_channels=32, channels=16, share_branch_weights=True).eval()
    n_sep = sum(p.numel() for p in sep.parameters())
    n_shared = sum(p.numel() for p in shared.parameters())
    assert shared.branch_parameter_sets() == 1 and 2 * n_shared == n_sep
    with torch.no_grad():
        last = shared(r, t, g)
    assert not torch.equal(last.z_rgb, last.z_t)


def test_global_ablation_ignores_g():
    ch, r, t, g = _pyramids()
    dec = SiameseDecoder(ch, global_channels=32, channels=16, global_interaction=False).eval()
    with torch.no_grad():
        a = dec(r, t, g)
        b = dec(r, t, g + torch.randn_like(g))
    assert torch.equal(a.z_rgb, b.z_rgb) and torch.equal(a.z_t, b.z_t)


def test_branch_score_range_and_size():
    head = ScoreHead(128).eval()
    with torch.no_grad():
        s = head(torch.randn(1, 128, 88, 88), (352, 352))
        assert s.shape == (1, 1, 352, 352) and s.min() >= 0 and s.max() <= 1
        s2 = head(torch.randn(1, 128, 88, 88), (352, 352))
    assert not torch.equal(s, s2)


def test_branch_score_half_for_zero_input():
    head = ScoreHead(16)
    torch.nn.init.zeros_(head.conv.bias)
    s = head(torch.zeros(1, 16, 8, 8), (32, 32))
    assert torch.allclose(s, torch.full_like(s, 0.5))


def test_final_fusion():
    fuse = FinalFusion(256).eval()
    z = torch.randn(1, 128, 88, 88)
    with torch.no_grad():
        s = fuse(MIBState(2, z, z), (352, 352))
        s0 = fuse(MIBState(2, z, torch.zeros_like(z)), (352, 352))
    for out in (s, s0):
        assert out.shape == (1, 1, 352, 352)
        assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_all_maps_in_unit_interval(tiny_config, scale):
    net = RGBTSaliencyNet(tiny_config).eval()
    with torch.no_grad():
        out = net(scale * torch.randn(2, 3, 64, 64), scale * torch.randn(2, 3, 64, 64))
    for name, m in out.maps().items():
        assert torch.isfinite(m).all() and m.min() >= 0 and m.max() <= 1, name
    assert out.sf.shape == out.s1.shape == (2, 1, 64, 64)


def test_every_parameter_receives_gradient(tiny_config):
    net = RGBTSaliencyNet(tiny_config).train()
    out = net(torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64))
    y = (torch.rand(2, 1, 64, 64) > 0.5).float()
    loss = sum(torch.nn.functional.binary_cross_entropy(m, y) for m in (out.sf, out.s1, out.s2)) \
        + out.sg.mean()
    loss.backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert not dead


@pytest.mark.parametrize("backbone,level,size", [("resnet50", 2, 8), ("resnet50plus", 1, 16)])
def test_resnet_variants(backbone, level, size):
    net = RGBTSaliencyNet(ModelConfig(backbone=backbone, input_size=64)).eval()
    with torch.no_grad():
        out = net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64), return_intermediates=True)
    last = out.intermediates["states"][-1]
    assert last.level == level and last.z_rgb.shape[-1] == size
    assert out.sf.shape == (1, 1, 64, 64)
