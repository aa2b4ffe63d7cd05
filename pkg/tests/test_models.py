import numpy as np
import pytest

from laoflab import autodiff as ad
from laoflab.autodiff import Tensor, backward
from laoflab.errors import ShapeError, UsageError
from laoflab.models import (
    VARIANTS,
    WIRING,
    LamModel,
    PatchEncoder,
    encode_visual,
    nearest_code,
    quantize,
    wiring_table,
)


def model(variant="LAOF", mode="continuous", d=12, **kw):
    return LamModel(variant, mode, d, 5, True, latent_dim=4, hidden=8, codebook_size=6, **kw)


class TestEncoder:
    def test_state_dim(self):
        enc = PatchEncoder(32, 32)
        assert enc.state_dim == 256
        assert enc(np.zeros((32, 32, 3), np.uint8)).shape == (256,)

    def test_black_is_zero(self):
        assert not PatchEncoder(16, 16)(np.zeros((16, 16, 3), np.uint8)).any()

    def test_locality(self):
        enc = PatchEncoder(16, 24)
        rng = np.random.default_rng(0)
        a = rng.integers(0, 256, (16, 24, 3), dtype=np.uint8)
        b = a.copy()
        b[8:16, 8:16] = 255 - b[8:16, 8:16]
        diff = np.nonzero(enc(a) != enc(b))[0]
        # patch (1, 1) in row-major order over a 2x3 grid is patch 4
        assert diff.min() >= 4 * 16 and diff.max() < 5 * 16

    def test_projection_rows_orthonormal(self):
        p = PatchEncoder(8, 8).projection
        np.testing.assert_allclose(p @ p.T, np.eye(p.shape[0]), atol=1e-5)

    def test_batch_matches_single(self):
        enc = PatchEncoder(16, 16)
        imgs = np.random.default_rng(1).integers(0, 256, (3, 16, 16, 3), dtype=np.uint8)
        batch = encode_visual(imgs, enc)
        np.testing.assert_allclose(batch[2], enc(imgs[2]), rtol=1e-6)

    def test_wrong_size(self):
        with pytest.raises((UsageError, ShapeError)):
            PatchEncoder(16, 16)(np.zeros((8, 8, 3), np.uint8))


class TestQuantizer:
    def test_exact_code(self):
        cb = np.random.default_rng(2).normal(size=(6, 3))
        q = quantize(Tensor(cb[3:4]), Tensor(cb))
        assert q.index.tolist() == [3]
        assert q.codebook_loss.item() == 0 and q.commitment_loss.item() == 0

    def test_tie_goes_to_lowest(self):
        cb = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
        assert nearest_code(np.zeros((1, 2)), cb).tolist() == [0]

    def test_straight_through(self):
        z = Tensor(np.random.default_rng(3).normal(size=(4, 3)), requires_grad=True)
        cb = Tensor(np.random.default_rng(4).normal(size=(5, 3)))
        q = quantize(z, cb)
        np.testing.assert_array_equal(q.z_q.data, cb.data[q.index])
        backward(ad.sum_(q.z_q))
        np.testing.assert_array_equal(z.grad, np.ones((4, 3)))

    def test_losses_and_beta(self):
        rng = np.random.default_rng(5)
        z, cb = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        q = quantize(Tensor(z), Tensor(cb), beta=0.25)
        ref = np.mean((z - cb[nearest_code(z, cb)]) ** 2)
        assert q.codebook_loss.item() == pytest.approx(ref, rel=1e-5)
        assert q.commitment_loss.item() == pytest.approx(0.25 * ref, rel=1e-5)

    def test_empty_codebook(self):
        with pytest.raises(ShapeError):
            quantize(Tensor(np.zeros((1, 2))), Tensor(np.zeros((0, 2))))


class TestWiring:
    def test_table(self):
        t = wiring_table()
        assert t["LAPO"] == {"IDM": True, "FDM": True, "flow decoder": False, "action decoder": False}
        assert t["LAOF"]["flow decoder"] and not t["LAOF"]["action decoder"]
        assert t["LAOF-Action"]["action decoder"] and t["LAOM-Action"]["action decoder"]
        assert not t["LAOM-Action"]["flow decoder"]
        assert not t["LAOF-OnlyZ"]["FDM"] and not t["LAOF-OnlyZS"]["FDM"]
        assert not t["LAOF-AE"]["IDM"]

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_components_match_wiring(self, variant):
        m = model(variant)
        w = WIRING[variant]
        assert (m.fdm is not None) == (w.fdm is not None)
        assert (m.action_decoder is not None) == w.action_decoder
        assert (m.flow_decoder is not None) == (w.flow_decoder in ("z", "zs"))

    def test_unknown_variant(self):
        with pytest.raises(UsageError):
            model("LAPO++")


class TestForward:
    rng = np.random.default_rng(6)
    s = rng.normal(size=(3, 12))
    z = rng.normal(size=(3, 4))

    def test_shapes(self):
        m = model("LAOF")
        assert m.idm_forward(self.s, self.s).z.shape == (3, 4)
        assert m.fdm_forward(self.s, self.z).shape == (3, 12)
        assert m.flow_decode(self.z).shape == (3, 12)
        assert m.action_decode(self.z).shape == (3, 5)
        assert m.policy_forward(self.s, 0).shape == (3, 4)

    def test_discrete_latents_are_codes(self):
        m = model("LAPO", mode="discrete")
        lat = m.idm_forward(self.s, self.s[::-1])
        np.testing.assert_array_equal(lat.z.data, m.quantizer.codebook.data[lat.index])
        assert lat.vq_loss is not None

    def test_fdm_is_residual_at_zero_head(self):
        m = model("LAPO")
        m.fdm.state_head.weight.data[:] = 0
        np.testing.assert_allclose(m.fdm_forward(self.s, self.z).data, self.s.astype(np.float32))

    def test_missing_components(self):
        with pytest.raises(UsageError):
            model("LAOF-OnlyZ").fdm_forward(self.s, self.z)
        with pytest.raises(UsageError):
            model("LAPO").flow_decode(self.z)
        with pytest.raises(UsageError):
            model("LAOF").action_decode(self.z, stage="pretrain")
        with pytest.raises(UsageError):
            model("LAOF-OnlyZS").flow_decode(self.z)
        with pytest.raises(UsageError):
            model("LAOF-AE").idm_forward(self.s, self.s)

    def test_flowfdm_second_head(self):
        m = model("LAOF-FlowFDM")
        s_hat, f_hat = m.fdm_forward(self.s, self.z)
        np.testing.assert_array_equal(m.flow_decode(self.z, self.s).data, f_hat.data)

    def test_state_shape_checked(self):
        with pytest.raises(ShapeError):
            model().idm_forward(np.zeros((2, 11)), np.zeros((2, 11)))

    def test_task_ids(self):
        m = model(n_tasks=2)
        a, b = m.policy_forward(self.s, 0).data, m.policy_forward(self.s, 1).data
        assert not np.allclose(a, b)
        with pytest.raises(UsageError):
            m.policy_forward(self.s, 2)

    def test_seeded_init(self):
        a, b = model(seed=3).state_dict(), model(seed=3).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = model(seed=4).state_dict()
        assert not all(np.array_equal(a[k], c[k]) for k in a)
