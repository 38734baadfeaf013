import numpy as np
import pytest

from ldcvae import autodiff as ad
from ldcvae.autodiff import Tensor
from ldcvae.encoders import N_CATEGORIES
from ldcvae.errors import DimensionMismatch
from ldcvae.gaussian import DiagGaussian, NoiseSource, kl_to_standard, reparameterize
from ldcvae.generative import (
    FunctionDecoder,
    FunctionMapper,
    differentiate_latent,
    joint_posterior,
    ldcvae_loss,
    reconstruct_genomics,
    report_total_check,
)
from ldcvae.nn import AdamW, ParamStore
from ldcvae.oracles import grid_product_moments

D = 4
D_G = 5


def store(seed=0):
    return ParamStore(np.random.default_rng(seed))


def g(mean, var):
    return DiagGaussian(np.asarray(mean, float), np.asarray(var, float))


def random_gaussian(rng, d=D, shape=None):
    shape = shape or (d,)
    return g(rng.normal(size=shape), rng.uniform(0.2, 2.0, size=shape))


# -- joint posterior --------------------------------------------------------

def test_joint_of_two_standard_experts():
    joint = joint_posterior(g([0.0], [1.0]), g([0.0], [1.0]))
    assert joint.mean.item() == 0.0 and joint.var.item() == pytest.approx(1 / 3, abs=1e-15)
    assert (joint.mean.item(), joint.var.item()) == pytest.approx(grid_product_moments([0, 0, 0], [1, 1, 1]),
                                                                  abs=1e-4)


def test_joint_without_genomics(rng):
    mu = rng.normal(size=3)
    joint = joint_posterior(g(mu, np.ones(3)))
    assert np.allclose(joint.mean.data, mu / 2) and np.allclose(joint.var.data, 0.5)
    gm, gv = grid_product_moments([0.0, mu[0]], [1.0, 1.0])
    assert joint.mean.data[0] == pytest.approx(gm, abs=1e-4) and joint.var.data[0] == pytest.approx(gv, abs=1e-4)


def test_joint_sharper_than_each_expert(rng):
    for _ in range(100):
        a, b = random_gaussian(rng), random_gaussian(rng)
        joint = joint_posterior(a, b)
        assert np.all(joint.var.data <= a.var.data) and np.all(joint.var.data <= b.var.data)


def test_uninformative_genomic_expert_converges_to_missing_case(rng):
    path = random_gaussian(rng)
    flat = g(rng.normal(size=D), np.full(D, 1e8))
    a, b = joint_posterior(path, flat), joint_posterior(path)
    assert np.allclose(a.mean.data, b.mean.data, atol=1e-4) and np.allclose(a.var.data, b.var.data, atol=1e-4)


def test_joint_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        joint_posterior(random_gaussian(rng, 3), random_gaussian(rng, 4))


# -- latent differentiation --------------------------------------------------

def test_mapper_outputs_six_positive_posteriors(rng):
    specific = differentiate_latent(Tensor(rng.normal(size=D)), FunctionMapper(store(), "m", D))
    assert len(specific) == N_CATEGORIES
    assert all(q.mean.shape == (D,) and np.all(q.var.data > 0) for q in specific)


def test_identical_weights_identical_posteriors(rng):
    m = FunctionMapper(store(), "m", D)
    for layer in (m.fc1, m.fc2):
        layer.weight.data[1] = layer.weight.data[0]
        layer.bias.data[1] = layer.bias.data[0]
    q = differentiate_latent(Tensor(rng.normal(size=D)), m)
    assert np.array_equal(q[0].mean.data, q[1].mean.data) and np.array_equal(q[0].var.data, q[1].var.data)
    assert not np.array_equal(q[0].mean.data, q[2].mean.data)


def test_zero_mapper_gives_standard_normal(rng):
    m = FunctionMapper(store(), "m", D)
    for layer in (m.fc1, m.fc2):
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    for q in differentiate_latent(Tensor(rng.normal(size=D)), m):
        assert np.array_equal(q.mean.data, np.zeros(D)) and np.array_equal(q.var.data, np.ones(D))


def test_mapper_kl_gradient_wrt_z(rng):
    m = FunctionMapper(store(), "m", D)
    for i in range(N_CATEGORIES):
        err = ad.finite_difference_check(lambda z: kl_to_standard(differentiate_latent(z, m)[i]),
                                         rng.normal(size=D))
        assert err < 1e-4


# -- reconstruction ---------------------------------------------------------

def test_zero_decoder_reconstructs_zero(rng):
    dec = FunctionDecoder(store(), "d", D, D_G)
    for layer in (dec.fc1, dec.fc2):
        layer.weight.data[:] = 0.0
    specific = FunctionMapper(store(1), "m", D)(Tensor(rng.normal(size=D)))
    out = reconstruct_genomics(specific, Tensor(rng.normal(size=D)), dec, NoiseSource(0))
    assert out.shape == (N_CATEGORIES, D_G) and np.array_equal(out.data, np.zeros((N_CATEGORIES, D_G)))


def test_reconstruction_reproducible(rng):
    dec = FunctionDecoder(store(), "d", D, D_G)
    specific = FunctionMapper(store(1), "m", D)(Tensor(rng.normal(size=D)))
    zy = Tensor(rng.normal(size=D))
    a = reconstruct_genomics(specific, zy, dec, NoiseSource(7)).data
    b = reconstruct_genomics(specific, zy, dec, NoiseSource(7)).data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, reconstruct_genomics(specific, zy, dec, NoiseSource(8)).data)


def test_reconstruction_paths_independent(rng):
    dec = FunctionDecoder(store(), "d", D, D_G)
    specific = FunctionMapper(store(1), "m", D)(Tensor(rng.normal(size=D)))
    zy = Tensor(rng.normal(size=D))
    before = reconstruct_genomics(specific, zy, dec, None).data.copy()
    dec.fc1.weight.data[3] += 1.0
    dec.fc2.bias.data[3] += 1.0
    after = reconstruct_genomics(specific, zy, dec, None).data
    others = [i for i in range(N_CATEGORIES) if i != 3]
    assert np.array_equal(before[others], after[others]) and not np.allclose(before[3], after[3])


def test_reconstruction_needs_six_posteriors(rng):
    dec = FunctionDecoder(store(), "d", D, D_G)
    with pytest.raises(DimensionMismatch):
        reconstruct_genomics(random_gaussian(rng, shape=(5, D)), Tensor(np.zeros(D)), dec, None)


def test_memorize_one_patient():
    rng = np.random.default_rng(0)
    s = store(3)
    mapper, dec = FunctionMapper(s, "m", D), FunctionDecoder(s, "d", D, D_G)
    target = Tensor(rng.normal(size=(N_CATEGORIES, D_G)))
    z, zy = Tensor(rng.normal(size=D)), Tensor(rng.normal(size=D))

    def mse(noise):
        return ad.mean(ad.square(reconstruct_genomics(mapper(z), zy, dec, noise) - target))

    initial = mse(None).item()
    opt = AdamW(dict(s.items()), lr=1e-2, weight_decay=0.0)
    for step in range(500):
        opt.zero_grad()
        ad.backward(mse(NoiseSource(0, step)))
        opt.step()
    assert mse(None).item() < 0.01 * initial


# -- loss report ------------------------------------------------------------

def loss_inputs(rng):
    X = Tensor(rng.normal(size=(N_CATEGORIES, D_G)))
    recon = Tensor(rng.normal(size=(N_CATEGORIES, D_G)))
    path, genes = random_gaussian(rng), random_gaussian(rng)
    specific = random_gaussian(rng, shape=(N_CATEGORIES, D))
    return X, path, genes, recon, specific, joint_posterior(path, genes)


def test_report_additivity(rng):
    for _ in range(20):
        X, path, genes, recon, specific, joint = loss_inputs(rng)
        beta, alpha = rng.uniform(), rng.uniform(0, 2)
        rep = ldcvae_loss(X, path, genes, recon, specific, joint, beta, alpha)
        assert report_total_check(rep) < 1e-10
        f = rep.as_floats()
        assert len(f["recon"]) == len(f["kl_specific"]) == N_CATEGORIES
        assert np.allclose(f["recon"], np.sum((X.data - recon.data) ** 2, axis=1), atol=1e-12)
        assert rep.total.item() >= 0


def test_perfect_case_leaves_alignment_only(rng):
    X = Tensor(rng.normal(size=(N_CATEGORIES, D_G)))
    std = DiagGaussian.standard(D)
    specific = DiagGaussian(np.zeros((N_CATEGORIES, D)), np.ones((N_CATEGORIES, D)))
    path = g(np.full(D, 0.3), np.full(D, 1.5))
    rep = ldcvae_loss(X, path, std, Tensor(X.data.copy()), specific, std, 1.0, 0.1)
    assert rep.total.item() == pytest.approx(0.1 * rep.align.item(), abs=1e-14)
    rep = ldcvae_loss(X, std, std, Tensor(X.data.copy()), specific, std, 1.0, 0.1)
    assert rep.total.item() == 0.0


def test_beta_zero_ignores_kl_terms(rng):
    X, path, genes, recon, specific, joint = loss_inputs(rng)
    base = ldcvae_loss(X, path, genes, recon, specific, joint, 0.0, 0.1).total.item()
    widened = DiagGaussian(specific.mean, specific.var * 3.0)
    joint2 = DiagGaussian(joint.mean, joint.var * 0.2)
    assert ldcvae_loss(X, path, genes, recon, widened, joint2, 0.0, 0.1).total.item() == base


def test_argument_validation(rng):
    X, path, genes, recon, specific, joint = loss_inputs(rng)
    with pytest.raises(ValueError):
        ldcvae_loss(X, path, genes, recon, specific, joint, 1.5, 0.1)
    with pytest.raises(ValueError):
        ldcvae_loss(X, path, genes, recon, specific, joint, 0.5, -0.1)
    with pytest.raises(DimensionMismatch):
        ldcvae_loss(X, path, genes, Tensor(np.zeros((5, D_G))), specific, joint, 0.5, 0.1)


def test_exact_alignment_switch(rng):
    X, path, genes, recon, specific, joint = loss_inputs(rng)
    a = ldcvae_loss(X, path, genes, recon, specific, joint, 0.5, 0.1, alignment="printed")
    b = ldcvae_loss(X, path, genes, recon, specific, joint, 0.5, 0.1, alignment="exact")
    assert a.align.item() != b.align.item()
    assert report_total_check(b) < 1e-10


def test_full_loss_gradient_over_all_parameter_groups():
    rng = np.random.default_rng(4)
    for trial in range(20):
        s = store(trial)
        mapper, dec = FunctionMapper(s, "m", D), FunctionDecoder(s, "d", D, D_G)
        X = Tensor(rng.normal(size=(N_CATEGORIES, D_G)))
        mp, lp = s.normal("path_mu", D, scale=1.0), s.normal("path_lv", D, scale=0.5)
        mg, lg = s.normal("gene_mu", D, scale=1.0), s.normal("gene_lv", D, scale=0.5)
        beta, alpha = rng.uniform(), 0.1

        def loss():
            path, genes = DiagGaussian.from_log_var(mp, lp), DiagGaussian.from_log_var(mg, lg)
            joint = joint_posterior(path, genes)
            noise = NoiseSource(trial)
            z = reparameterize(joint, noise)
            specific = mapper(z)
            recon = reconstruct_genomics(specific, reparameterize(path, noise), dec, noise)
            return ldcvae_loss(X, path, genes, recon, specific, joint, beta, alpha).total

        report = ad.check_parameter_gradients(loss, dict(s.items()), max_coords=4, rng=rng)
        assert max(report.values()) < 1e-4, report
