import numpy as np
import pytest

from semimap import autodiff as ad
from semimap import nets
from semimap.nets import ArchConfig, Model

from fd import sampled_param_check

SMALL = ArchConfig(resolution=16, latent=8, joints=3, stem=4, stages=(4, 6), decoder=(6, 4, 4))


def images(n, res=16, seed=0):
    return ad.constant(np.random.default_rng(seed).uniform(-1, 1, size=(n, res, res, 1)))


@pytest.fixture
def model(f64):
    m = Model(SMALL, seed=3)
    rng = np.random.default_rng(9)
    # move zero-initialised layers off zero so every path carries gradient
    for net in (m.m, m.p):
        for k, t in net.params.items():
            if not t.data.any():
                t.data = rng.normal(0, 0.3, size=t.shape)
    return m


def weighted(out, seed=1):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_(ad.mul(out, ad.constant(w)))


def test_output_shapes_default_arch():
    m = Model(ArchConfig(), seed=0)
    x = images(2, 32)
    z = m.f(x)
    assert z.shape == (2, 64)
    assert m.m(z).shape == (2, 64)
    assert m.p(z).shape == (2, 21)
    assert m.g(z).shape == (2, 32, 32, 1)
    assert m.h(z).shape == (2, 1)


def test_encoder_rejects_wrong_resolution():
    m = Model(SMALL)
    with pytest.raises(ad.ShapeError):
        m.f(images(1, 32))
    with pytest.raises(ad.ShapeError):
        m.m(ad.constant(np.zeros((1, 5))))


def test_eval_mode_deterministic():
    m = Model(SMALL, seed=1)
    m.eval()
    x = images(3)
    z1, z2 = m.f(x), m.f(x)
    np.testing.assert_array_equal(z1.data, z2.data)
    np.testing.assert_array_equal(m.g(z1).data, m.g(z2).data)
    np.testing.assert_array_equal(m.h(z1).data, m.h(z2).data)


def test_mapper_identity_at_init():
    m = Model(SMALL, seed=2)
    z = ad.constant(np.random.default_rng(0).normal(size=(5, 8)))
    np.testing.assert_array_equal(m.m(z).data, z.data)


def test_decoder_tanh_bound():
    m = Model(SMALL, seed=0)
    z = ad.constant(np.random.default_rng(0).normal(size=(4, 8)) * 50)
    assert np.abs(m.g(z).data).max() < 1.0


def test_stem_gradients_finite_and_nonzero(f64):
    m = Model(SMALL, seed=4)
    with ad.Tape() as tape:
        tape.backward(ad.mean(m.f(images(2))))
    g = m.f.params["stem.w"].grad
    assert np.all(np.isfinite(g)) and np.abs(g).max() > 0


@pytest.mark.parametrize("net", ["f", "m", "p", "g", "h"])
def test_network_gradients_match_finite_differences(model, net):
    x = images(3, seed=5)
    z0 = ad.constant(np.random.default_rng(6).normal(size=(3, 8)))
    if net == "f":
        out = lambda: weighted(model.f(x))
    else:
        out = lambda: weighted(getattr(model, net)(z0))
    tensors = list(getattr(model, net).params.values())
    assert sampled_param_check(out, tensors, samples=3) < 1e-4


def test_end_to_end_composite_gradient(model):
    from semimap import objectives as ob

    x = images(4, seed=7)
    pose = np.random.default_rng(8).normal(size=(2, 9))
    view = np.random.default_rng(9).uniform(-0.9, 0.9, size=(4, 16, 16, 1))

    def loss():
        zs = model.latent(ad.slice_rows(x, 0, 2), nets.SYNTH)
        zr = model.latent(ad.slice_rows(x, 2, 4), nets.REAL)
        z = ad.concat([zs, zr])
        parts = ob.LossParts(
            l_p=ob.pose_loss(model.p(zs), pose),
            # a detached target is invisible to finite differences
            l_c=ob.correspondence_loss(zr, zs, detach_target=False),
            l_g=ob.view_loss(model.g(z), view),
            l_m=ob.mapper_adversarial_loss(model.h(zr)),
        )
        return ob.composite_loss(parts, ob.LossWeights(0.5, 0.3, 0.7))

    tensors = [t for net in model.nets.values() if net.name != "h" for t in net.params.values()]
    assert sampled_param_check(loss, tensors, samples=2) < 1e-4


def test_routing_tracer():
    m = Model(SMALL)
    m.tracer = nets.RouteTracer()
    x = images(2)
    m.predict(x, nets.SYNTH)
    m.predict(x, nets.REAL)
    assert m.tracer.routes == [(nets.SYNTH, ("f",)), (nets.REAL, ("f", "m"))]
    assert m.tracer.violations() == []
    m.tracer.log(nets.SYNTH, ("f", "m"))
    assert len(m.tracer.violations()) == 1
    with pytest.raises(ValueError):
        m.latent(x, "other")


def test_parameter_partition():
    m = Model(SMALL)
    report = m.partition_report()
    assert list(report) == list(nets.NETWORKS)
    ids = [id(t) for net in m.nets.values() for t in net.params.values()]
    assert len(ids) == len(set(ids))
    assert sum(report.values()) == m.param_count()


def test_checkpoint_round_trip(tmp_path):
    a, b = Model(SMALL, seed=0), Model(SMALL, seed=1)
    path = tmp_path / "m.ckpt"
    nets.save_checkpoint(path, a.state_entries())
    b.load_entries(nets.load_checkpoint(path))
    for (n1, l1, x1), (n2, l2, x2) in zip(a.state_entries(), b.state_entries()):
        assert (n1, l1) == (n2, l2)
        np.testing.assert_array_equal(x1.astype(np.float32), x2.astype(np.float32))


def test_checkpoint_validation(tmp_path):
    blob = nets.encode_checkpoint(Model(SMALL).state_entries())
    with pytest.raises(nets.CheckpointError, match="magic"):
        nets.decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(nets.CheckpointError):
        nets.decode_checkpoint(blob[:-4])
    with pytest.raises(nets.CheckpointError):
        nets.decode_checkpoint(blob + b"\0\0\0\0")
    other = Model(ArchConfig(resolution=16, latent=16, joints=3, stem=4, stages=(4, 6), decoder=(6, 4, 4)))
    with pytest.raises(ValueError):
        other.load_entries(nets.decode_checkpoint(blob))


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchConfig(resolution=24)
    with pytest.raises(ValueError):
        ArchConfig(decoder=(8, 8))
