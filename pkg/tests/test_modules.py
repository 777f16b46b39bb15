import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from casfusion import tensor as T
from casfusion.gcm import GlobalCompletion
from casfusion.lrm import LocalRefinement, agent_groups, lrm_refine, select_agents
from casfusion.objective import cd_loss, sem_loss
from casfusion.ssm import SemanticSegmentation
from casfusion.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def wake(head, seed=1, scale=0.1):
    """Give a zero-initialised head the small random weights a training step would."""
    r = rng(seed)
    for layer in head.layers:
        layer.weight.data[:] += scale * r.standard_normal(layer.weight.shape)


def grads_of(module):
    return {n: p.grad for n, p in module.named_parameters()}


# -- global completion ---------------------------------------------------------------

def test_gcm_zero_head_duplicates_points():
    gcm = GlobalCompletion(8, 2, rng(), n_attn=3, n_group=4)
    p = Tensor(rng(1).random((4, 3)))
    out = gcm(p, Tensor(rng(2).standard_normal((1, 8))), encode=False)
    assert np.array_equal(out.p_g.data, np.repeat(p.data, 2, axis=0))
    assert np.all(out.d_l.data == 0)


@pytest.mark.parametrize("ratio", [1, 2, 3])
def test_gcm_row_count(ratio):
    gcm = GlobalCompletion(8, ratio, rng(), n_attn=3, n_group=4)
    out = gcm(Tensor(rng(1).random((10, 3))), Tensor(np.zeros((1, 8))), encode=True)
    assert out.p_g.shape == (10 * ratio, 3)
    assert out.h_g.shape == (10 * ratio, 8)
    assert out.f_g.shape == (1, 8)


def test_gcm_full_scale_rows():
    gcm = GlobalCompletion(4, 2, rng(), n_attn=2, n_group=2)
    out = gcm(Tensor(rng(1).random((2048, 3))), Tensor(np.zeros((1, 4))), encode=False)
    assert len(out.p_g) == 4096


def test_gcm_rejects_misaligned_hidden_rows():
    gcm = GlobalCompletion(4, 2, rng(), n_attn=2, n_group=2)
    with pytest.raises(ValueError):
        gcm(Tensor(rng(1).random((5, 3))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((4, 4))))


def test_gcm_chamfer_grad_check():
    gcm = GlobalCompletion(8, 2, rng(), n_attn=3, n_group=4)
    wake(gcm.head)
    p = Tensor(rng(1).random((8, 3)))
    f = Tensor(rng(2).standard_normal((1, 8)))
    h = Tensor(rng(3).standard_normal((8, 8)))
    target = rng(4).random((16, 3))
    loss = lambda: cd_loss(gcm(p, f, h, encode=False).p_g, target)[0]
    assert T.grad_check(loss, gcm.parameters() + [f, h]) < 1e-4


def test_gcm_displacements_reach_transformer():
    gcm = GlobalCompletion(8, 2, rng(), n_attn=3, n_group=4)
    wake(gcm.head)
    out = gcm(Tensor(rng(1).random((8, 3))), Tensor(rng(2).standard_normal((1, 8))), encode=False)
    T.backward(cd_loss(out.p_g, rng(3).random((16, 3)))[0])
    grads = grads_of(gcm.transformer)
    assert all(g is not None for g in grads.values())
    assert sum(float(np.abs(g).sum()) for g in grads.values()) > 0


# -- semantic segmentation -------------------------------------------------------------

def ssm_inputs(m, c, d, ratio, seed=1):
    r = rng(seed)
    return (Tensor(r.standard_normal((m, c))), Tensor(r.standard_normal((1, d))),
            Tensor(r.standard_normal((ratio * m, d))), Tensor(r.random((ratio * m, 3))))


def test_ssm_zero_head_duplicates_labels():
    ssm = SemanticSegmentation(8, 4, 2, rng(), n_edge=3, n_attn=3)
    l, f, h, p = ssm_inputs(6, 4, 8, 2)
    out = ssm(l, f, h, p)
    assert np.array_equal(out.l_s.data, np.repeat(l.data, 2, axis=0))
    assert np.array_equal(out.l_s.data.argmax(1), np.repeat(l.data.argmax(1), 2))


def test_ssm_full_scale_rows():
    ssm = SemanticSegmentation(8, 4, 2, rng(), n_edge=2, n_attn=2)
    out = ssm(*ssm_inputs(2048, 4, 8, 2))
    assert out.l_s.shape == (4096, 4)
    assert out.h_s.shape == (4096, 8)


def test_ssm_rejects_misaligned_rows():
    ssm = SemanticSegmentation(8, 4, 2, rng(), n_edge=2, n_attn=2)
    l, f, h, p = ssm_inputs(6, 4, 8, 2)
    with pytest.raises(ValueError):
        ssm(l, f, Tensor(h.data[:-1]), p)


def test_ssm_focal_grad_check():
    ssm = SemanticSegmentation(6, 3, 2, rng(), n_edge=3, n_attn=3)
    wake(ssm.head)
    l, f, h, p = ssm_inputs(8, 3, 6, 2)
    target = rng(5).random((16, 3))
    labels = rng(6).integers(0, 3, 16)
    _, corr = cd_loss(p, target)

    def loss():
        return sem_loss(ssm(l, f, h, p).l_s, corr, labels, gamma=2.0)

    assert T.grad_check(loss, ssm.parameters() + [l, f, h]) < 1e-4


# -- local refinement ---------------------------------------------------------------------

def test_select_agents_examples():
    d = np.array([[3.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    assert select_agents(d, 2).tolist() == [0, 2]
    assert select_agents(d, 3).tolist() == [0, 2, 1]


def test_select_agents_matches_full_sort():
    d = rng(1).standard_normal((100, 3))
    norms = np.linalg.norm(d, axis=1)
    ref = sorted(range(100), key=lambda i: (-norms[i], i))[:10]
    assert select_agents(d, 10).tolist() == ref


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)),
                  elements=st.sampled_from([0.0, 0.5, -0.5, 1.0, 2.0])), st.data())
def test_select_agents_ties_to_lowest_index(d, data):
    k = data.draw(st.integers(0, len(d)))
    norms = np.sqrt((d * d).sum(1))
    ref = sorted(range(len(d)), key=lambda i: (-norms[i], i))[:k]
    assert select_agents(d, k).tolist() == ref


def test_lrm_zero_head_appends_agents_verbatim():
    branch = LocalRefinement(3, 8, rng(), n=4)
    p = Tensor(rng(1).random((20, 3)))
    d_l = rng(2).standard_normal((20, 3))
    out, agents = lrm_refine(branch, p, p, d_l, 5)
    assert out.shape == (25, 3)
    assert np.array_equal(out.data, np.vstack([p.data, p.data[agents]]))


def test_lrm_full_scale_rows():
    branch = LocalRefinement(3, 4, rng(), n=4)
    p = Tensor(rng(1).random((4096, 3)))
    out, _ = lrm_refine(branch, p, p, rng(2).standard_normal((4096, 3)), 96)
    assert len(out) == 4192


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 8))
def test_lrm_leaves_original_rows_untouched(seed, k):
    r = np.random.default_rng(seed)
    branch = LocalRefinement(4, 6, rng(), n=3, use_values=True)
    wake(branch.head, seed)
    p = Tensor(r.random((12, 3)))
    x = Tensor(r.standard_normal((12, 4)))
    out, agents = lrm_refine(branch, x, p, r.standard_normal((12, 3)), k)
    assert out.shape == (12 + k, 4)
    assert np.array_equal(out.data[:12], x.data)


def test_lrm_branches_share_groups():
    p = Tensor(rng(1).random((30, 3)))
    d_l = rng(2).standard_normal((30, 3))
    agents = select_agents(d_l, 6)
    groups = agent_groups(p, agents, 4)
    assert groups.shape == (6, 4)
    assert np.array_equal(groups[:, 0], agents)


def test_lrm_grad_check():
    branch = LocalRefinement(3, 6, rng(), n=4)
    wake(branch.head)
    p = Tensor(rng(1).random((16, 3)))
    d_l = rng(2).standard_normal((16, 3))
    target = rng(3).random((20, 3))
    loss = lambda: cd_loss(lrm_refine(branch, p, p, d_l, 4)[0], target)[0]
    assert T.grad_check(loss, branch.parameters() + [p]) < 1e-4
