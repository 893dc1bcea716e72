"""Model tests: dense attention oracle, whole-model finite-difference
gradient checks on a 12-node fixture, and checkpoint round-trips."""

import numpy as np
import pytest

import grafuse.tensor as T
from grafuse.errors import DataError, ShapeError
from grafuse.graph import SparseMatrix, build_hopset, generate_sbm, normalize_adjacency
from grafuse.models import (
    GcnModel,
    MultiHopGatModel,
    ResidualGnnModel,
    build_structure,
    embed,
    gat_attention,
    glorot,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)

RNG = np.random.default_rng(123)


@pytest.fixture(scope="module")
def fixture12():
    return generate_sbm([6, 6], 0.8, 0.2, 5, 2.0, 0)


def leaky(x, s=0.2):
    return np.where(x > 0, x, s * x)


def dense_gat_oracle(x, adj_pattern, w, a_src, a_dst):
    """Brute-force attention: per node, softmax over its stored neighbors."""
    wh = x @ w
    n = x.shape[0]
    out = np.zeros((n, w.shape[1]))
    for i in range(n):
        nbrs = np.nonzero(adj_pattern[i])[0]
        scores = leaky(wh[i] @ a_src[:, 0] + wh[nbrs] @ a_dst[:, 0])
        e = np.exp(scores - scores.max())
        alpha = e / e.sum()
        out[i] = alpha @ wh[nbrs]
    return out


# ------------------------------------------------------------------ GCN


def test_gcn_zero_weights_uniform_softmax(fixture12):
    m = GcnModel(5, 2, hidden=4, seed=0)
    m.w0.data[:] = 0.0
    m.w1.data[:] = 0.0
    adj = build_structure(m, fixture12)
    logits = model_forward(m, fixture12, adj)
    assert np.all(logits.data == 0.0)
    probs = T.row_softmax(logits).data
    np.testing.assert_allclose(probs, 0.5)


def test_gcn_single_node_is_mlp():
    # lone self-loop: adjacency collapses to [[1]], so forward == 2-layer MLP
    m = GcnModel(3, 2, hidden=4, seed=1)
    adj = normalize_adjacency(np.zeros((0, 2), dtype=int), 1)
    x = T.Tensor(RNG.normal(size=(1, 3)))
    got = m.forward(x, adj)
    want = np.maximum(x.data @ m.w0.data, 0) @ m.w1.data
    np.testing.assert_allclose(got.data, want, atol=1e-12)


def test_gcn_dropout_only_in_train_mode(fixture12):
    m = GcnModel(5, 2, hidden=4, dropout=0.5, seed=3)
    adj = build_structure(m, fixture12)
    a = model_forward(m, fixture12, adj, train=False).data
    b = model_forward(m, fixture12, adj, train=False).data
    c = model_forward(m, fixture12, adj, train=True, epoch=1).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# ------------------------------------------------------------- attention


def test_gat_self_loop_only_returns_wh():
    m = SparseMatrix.identity(3)
    x = T.Tensor(RNG.normal(size=(3, 4)))
    w = T.Tensor(RNG.normal(size=(4, 2)))
    a_s = T.Tensor(RNG.normal(size=(2, 1)))
    a_d = T.Tensor(RNG.normal(size=(2, 1)))
    out = gat_attention(x, m, (w, a_s, a_d))
    np.testing.assert_allclose(out.data, x.data @ w.data, atol=1e-12)


def test_gat_identical_features_uniform_alpha():
    pattern = np.ones((4, 4))
    m = SparseMatrix.from_dense(pattern)
    x = T.Tensor(np.tile(RNG.normal(size=(1, 3)), (4, 1)))
    w = T.Tensor(RNG.normal(size=(3, 2)))
    a_s = T.Tensor(RNG.normal(size=(2, 1)))
    a_d = T.Tensor(RNG.normal(size=(2, 1)))
    out = gat_attention(x, m, (w, a_s, a_d))
    # uniform attention over identical rows = plain mean of identical Wh
    np.testing.assert_allclose(out.data, x.data @ w.data, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_gat_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    pattern = ((rng.random((5, 5)) < 0.6) + np.eye(5)) > 0
    m = SparseMatrix.from_dense(pattern.astype(float))
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    a_s = rng.normal(size=(3, 1))
    a_d = rng.normal(size=(3, 1))
    got = gat_attention(T.Tensor(x), m, (T.Tensor(w), T.Tensor(a_s), T.Tensor(a_d)))
    want = dense_gat_oracle(x, pattern, w, a_s, a_d)
    np.testing.assert_allclose(got.data, want, atol=1e-10)


def test_gat_shape_guard():
    with pytest.raises(ShapeError):
        gat_attention(T.Tensor(np.ones((3, 2))), SparseMatrix.identity(4),
                      (T.Tensor(np.ones((2, 2))), T.Tensor(np.ones((2, 1))),
                       T.Tensor(np.ones((2, 1)))))


# ---------------------------------------------------------- multi-hop GAT


def test_mhgat_beta_zero_equal_mixing(fixture12):
    m = MultiHopGatModel(5, 2, head_dim=3, K=2, seed=0)
    mix = T.row_softmax(m.beta).data
    np.testing.assert_allclose(mix, [[0.5, 0.5]], atol=1e-12)
    assert abs(mix.sum() - 1.0) < 1e-12


def test_mhgat_k1_collapses_to_gat_layer(fixture12):
    m = MultiHopGatModel(5, 2, head_dim=3, K=1, max_neighbors=64, seed=4)
    hs = build_structure(m, fixture12)
    got = model_forward(m, fixture12, hs).data
    x = fixture12.features
    heads = [gat_attention(x, hs.hop(1), hp) for hp in m.attn[0]]
    z = T.concat_cols(heads)
    hidden = T.add(T.layer_norm(z, m.ln_gain, m.ln_bias), T.matmul(x, m.p_res))
    want = T.matmul(hidden, m.w_out).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_mhgat_empty_hop_contributes_zero():
    # 2-node graph has no 2-hop pairs: level 2 must stay empty but the
    # softmax over beta still spans both hops
    bundle = generate_sbm([3, 3], 1.0, 1.0, 4, 1.0, 0)  # complete graph K6
    m = MultiHopGatModel(4, 2, head_dim=3, K=2, seed=1)
    hs = build_structure(m, bundle)
    assert hs.hop(2).nnz == 0
    out = model_forward(m, bundle, hs)
    assert np.all(np.isfinite(out.data))
    # mixing coefficient for the live hop is strictly below 1
    assert T.row_softmax(m.beta).data[0, 0] < 1.0


def test_mhgat_attention_rows_sum_to_one(fixture12):
    m = MultiHopGatModel(5, 2, head_dim=3, K=2, seed=2)
    hs = build_structure(m, fixture12)
    for k in (1, 2):
        hop = hs.hop(k)
        if hop.nnz == 0:
            continue
        x = fixture12.features
        w, a_s, a_d = m.attn[k - 1][0]
        wh = T.matmul(x, w)
        scores = T.leaky_relu(T.add(
            T.gather_rows(T.matmul(wh, a_s), hop.row_ids),
            T.gather_rows(T.matmul(wh, a_d), hop.indices)), 0.2)
        from grafuse.graph import segment_softmax
        alpha = segment_softmax(scores, hop).data[:, 0]
        sums = np.add.reduceat(alpha, hop.indptr[:-1])
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)


def test_mhgat_beta_gradient_fd(fixture12):
    m = MultiHopGatModel(5, 2, head_dim=3, K=2, seed=5)
    hs = build_structure(m, fixture12)
    labels, idx = fixture12.labels, fixture12.train_idx

    def loss_value():
        return T.masked_cross_entropy(
            model_forward(m, fixture12, hs), labels, idx).data.item()

    for _, p in m.params():
        p.zero_grad()
    T.backward(T.masked_cross_entropy(model_forward(m, fixture12, hs), labels, idx))
    h = 1e-6
    num = np.zeros_like(m.beta.data)
    for i in range(m.beta.size):
        orig = m.beta.data.flat[i]
        m.beta.data.flat[i] = orig + h
        up = loss_value()
        m.beta.data.flat[i] = orig - h
        down = loss_value()
        m.beta.data.flat[i] = orig
        num.flat[i] = (up - down) / (2 * h)
    rel = np.abs(m.beta.grad - num).max() / max(np.abs(num).max(), 1e-8)
    assert rel < 1e-4


# --------------------------------------------------- whole-model FD checks


def fd_check_model(model, bundle, structure, train, rtol=1e-4):
    """Max relative error between tape and central-difference gradients,
    across every parameter tensor of the model."""
    labels, idx = bundle.labels, bundle.train_idx

    def loss_value():
        return T.masked_cross_entropy(
            model_forward(model, bundle, structure, train=train, epoch=0),
            labels, idx).data.item()

    for _, p in model.params():
        p.zero_grad()
    T.backward(T.masked_cross_entropy(
        model_forward(model, bundle, structure, train=train, epoch=0), labels, idx))
    worst = 0.0
    h = 1e-6
    for name, p in model.params():
        num = np.zeros_like(p.data)
        for i in range(p.data.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            up = loss_value()
            p.data.flat[i] = orig - h
            down = loss_value()
            p.data.flat[i] = orig
            num.flat[i] = (up - down) / (2 * h)
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        scale = max(np.abs(num).max(), 1e-6)
        rel = np.abs(got - num).max() / scale
        worst = max(worst, rel)
        assert rel < rtol, f"{model.kind}.{name}: rel err {rel:.2e}"
    return worst


@pytest.mark.parametrize("seed", [0, 1])
def test_whole_model_gradients_gcn(fixture12, seed):
    m = GcnModel(5, 2, hidden=6, dropout=0.4, seed=seed)
    fd_check_model(m, fixture12, build_structure(m, fixture12), train=True)


@pytest.mark.parametrize("seed", [0, 1])
def test_whole_model_gradients_gnn(fixture12, seed):
    m = ResidualGnnModel(5, 2, hidden=6, dropout=0.3, seed=seed)
    fd_check_model(m, fixture12, build_structure(m, fixture12), train=True)


@pytest.mark.parametrize("seed", [0, 1])
def test_whole_model_gradients_mhgat(fixture12, seed):
    m = MultiHopGatModel(5, 2, head_dim=3, K=2, seed=seed)
    fd_check_model(m, fixture12, build_structure(m, fixture12), train=False)


# ------------------------------------------------------------- embeddings


def test_embed_shapes_and_determinism(fixture12):
    for model in (GcnModel(5, 2, hidden=6, seed=0),
                  ResidualGnnModel(5, 2, hidden=6, seed=0),
                  MultiHopGatModel(5, 2, head_dim=3, K=2, seed=0)):
        structure = build_structure(model, fixture12)
        e1 = embed(model, fixture12, structure)
        e2 = embed(model, fixture12, structure)
        assert e1.data.shape[0] == fixture12.num_nodes
        np.testing.assert_array_equal(e1.data, e2.data)
    assert embed(ResidualGnnModel(5, 2, hidden=6, seed=0), fixture12,
                 normalize_adjacency(fixture12.edges, 12)).data.shape == (12, 6)


# ------------------------------------------------------------ checkpoints


@pytest.mark.parametrize("maker", [
    lambda: GcnModel(5, 3, hidden=4, seed=7),
    lambda: ResidualGnnModel(5, 3, hidden=4, seed=7),
    lambda: MultiHopGatModel(5, 3, head_dim=3, K=2, seed=7),
])
def test_checkpoint_roundtrip(tmp_path, maker, fixture12):
    m = maker()
    m.epoch = 33
    save_checkpoint(m, tmp_path / "ckpt")
    r = load_checkpoint(tmp_path / "ckpt")
    assert r.epoch == 33
    for (n1, p1), (n2, p2) in zip(m.params(), r.params()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    # byte-identical re-save
    save_checkpoint(r, tmp_path / "ckpt2")
    assert (tmp_path / "ckpt" / "params.bin").read_bytes() == \
        (tmp_path / "ckpt2" / "params.bin").read_bytes()
    assert (tmp_path / "ckpt" / "meta.json").read_bytes() == \
        (tmp_path / "ckpt2" / "meta.json").read_bytes()


def test_checkpoint_corrupt_params(tmp_path):
    m = GcnModel(4, 2, hidden=3, seed=0)
    save_checkpoint(m, tmp_path / "c")
    blob = (tmp_path / "c" / "params.bin").read_bytes()
    (tmp_path / "c" / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(DataError, match="params.bin"):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_unknown_kind(tmp_path):
    m = GcnModel(4, 2, hidden=3, seed=0)
    save_checkpoint(m, tmp_path / "c")
    import json
    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    meta["kind"] = "mystery"
    (tmp_path / "c" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DataError, match="kind"):
        load_checkpoint(tmp_path / "c")


def test_glorot_seeded_reproducible():
    a = glorot(np.random.default_rng(5), 4, 6)
    b = glorot(np.random.default_rng(5), 4, 6)
    np.testing.assert_array_equal(a.data, b.data)
    limit = np.sqrt(6.0 / 10)
    assert np.abs(a.data).max() <= limit
