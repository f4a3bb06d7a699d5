"""Acceptance checks for the package's headline guarantees.

Every numerical claim is verified against an independent reference
implemented here with plain numpy/scipy, never by calling the code
under test twice. Each check registers a one-line summary that pytest
prints at the end of the run.
"""
import dataclasses
import math
import shutil
import time
from collections import Counter

import numpy as np
import pytest
from scipy import sparse
from scipy.stats import spearmanr

from acceptance_report import criterion
import tardgr.retrieval as R
import tardgr.tensor as T
from tardgr.config import RunConfig
from tardgr.encoder import bpr_loss, pretrain_bpr
from tardgr.graph import accumulate, build_dynamic, normalized_propagate
from tardgr.library import SubgraphLibrary, build_library, l2_topk
from tardgr.graph import Subgraph
from tardgr.metrics import EvalReport, ndcg_at_k, recall_at_k
from tardgr.pipeline import Paths, ingest, run_stage, variant_name
from tardgr.synth import SyntheticSpec, generate_synthetic, write_synthetic
from tardgr.tam import PairBatch, biscl_loss, forward_scores, init_tam, \
    score_pairs, train_relevance_model
from tardgr.task_eval import classify, delta_rel, positive_set


STAGES = ("pretrain", "build-library", "label", "train-tam",
          "finetune", "evaluate")


def run_all(cfg):
    cfg.validate()
    ingest(cfg)
    for stage in STAGES:
        run_stage(stage, cfg)


# ---------------------------------------------------------------------------
# 1. every differentiable op and composite loss against finite differences


def _readout(t, w):
    return T.reduce_sum(T.mul(t, T.Tensor(np.asarray(w, np.float64))))


def _gradient_cases():
    """(name, point, scalar f) triples covering each op's vjp."""
    rng = np.random.default_rng(7)
    cases = []

    def case(name, point, f, step=1e-3):
        cases.append((name, np.asarray(point, np.float64), f, step))

    x34 = rng.normal(size=(3, 4))
    c34 = rng.normal(size=(3, 4))
    w34 = rng.normal(size=(3, 4))
    w64 = rng.normal(size=(6, 4))
    case("add", x34, lambda x: _readout(T.add(x, T.Tensor(c34)), w34))
    case("mul", x34, lambda x: _readout(T.mul(x, T.Tensor(c34)), w34))
    case("scale", x34, lambda x: _readout(T.scale(x, -1.7), w34))
    case("concat", x34,
         lambda x: _readout(T.concat([x, T.scale(x, 2.0)], axis=0), w64))
    case("row_softmax", x34, lambda x: _readout(T.row_softmax(x), w34))
    # the relu check needs a point clear of the kink at zero
    case("relu", x34 + 0.25 * np.sign(x34),
         lambda x: _readout(T.relu(x), w34))
    case("sigmoid", x34, lambda x: _readout(T.sigmoid(x), w34))
    case("layer_norm", x34, lambda x: _readout(T.layer_norm(x), w34))
    case("log", x34,
         lambda x: _readout(T.log(T.add(T.mul(x, x),
                                        T.Tensor(np.full((3, 4), 0.5)))),
                            w34))
    case("exp", x34, lambda x: _readout(T.exp(T.scale(x, 0.3)), w34))
    w3 = rng.normal(size=3)
    w4 = rng.normal(size=4)
    case("reduce_sum", x34,
         lambda x: _readout(T.reduce_sum(x, axis=1), w3))
    case("reduce_mean", x34,
         lambda x: _readout(T.reduce_mean(x, axis=0), w4))
    w23 = rng.normal(size=(2, 3))
    case("matmul/gather_rows/transpose_last", rng.normal(size=(5, 3)),
         lambda x: _readout(
             T.matmul(T.gather_rows(x, [0, 1]),
                      T.transpose_last(T.gather_rows(x, [2, 3, 4]))),
             w23))
    w1 = rng.normal(size=1)
    case("cosine_similarity", rng.normal(size=(2, 5)),
         lambda x: _readout(T.cosine_similarity(T.gather_rows(x, [0]),
                                                T.gather_rows(x, [1])),
                            w1))
    case("squared_error", x34,
         lambda x: T.reduce_mean(T.squared_error(x, T.Tensor(c34))))

    # graph propagation, both normalizations, with an isolated node
    edges = [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)]
    r = [a for a, _ in edges] + [b for _, b in edges]
    c = [b for _, b in edges] + [a for a, _ in edges]
    adj = sparse.csr_matrix((np.ones(len(r)), (r, c)), shape=(6, 6))
    x63 = rng.normal(size=(6, 3))
    w63 = rng.normal(size=(6, 3))
    case("propagate row-stochastic", x63,
         lambda x: _readout(normalized_propagate(adj, x, "row-stochastic"),
                            w63))
    case("propagate symmetric", x63,
         lambda x: _readout(
             normalized_propagate(adj, x, "symmetric", keep_isolated=True),
             w63))

    case("bpr loss", rng.normal(size=(2, 6)),
         lambda x: bpr_loss(T.reshape(T.gather_rows(x, [0]), (6,)),
                            T.reshape(T.gather_rows(x, [1]), (6,))))

    targets = rng.normal(size=6)
    case("bi-level loss wrt scores", rng.normal(size=6),
         lambda x: biscl_loss(x, targets, rho=0.6, tau=1.0)[0])

    hq = rng.normal(size=(4, 3))
    hr = rng.normal(size=(4, 3))
    w43 = rng.normal(size=(4, 3))
    case("gate blend wrt inputs", hq,
         lambda x: _readout(
             R.fuse_query_rows(x, T.Tensor(hr), T.Tensor(np.array([0.3]))),
             w43))
    case("gate blend wrt gate", np.array([0.3]),
         lambda x: _readout(R.fuse_query_rows(T.Tensor(hq), T.Tensor(hr), x),
                            w43))

    # full relevance model + bi-level loss, one check per parameter array;
    # zero-init biases are nudged off the relu kinks first
    params = init_tam(4, heads=2, structure_layers=1, d_hid=4, hidden=3,
                      seed=11)
    arrays64 = {k: v.astype(np.float64) + 0.03 * rng.normal(size=v.shape)
                for k, v in params.arrays.items()}
    batch = PairBatch(tokens=rng.normal(size=(3, 2, 4)).astype(np.float32),
                      targets=rng.normal(size=3))

    def tam_case(name):
        def f(x):
            leaves = {k: (x if k == name else T.Tensor(arrays64[k]))
                      for k in arrays64}
            scores = forward_scores(leaves, batch, heads=2,
                                    structure_layers=1, d_hid=4, hidden=3)
            return biscl_loss(scores, batch.targets, rho=0.6, tau=1.0)[0]
        case(f"relevance model wrt {name}", arrays64[name], f, step=1e-4)

    for name in arrays64:
        tam_case(name)

    # fine-tune objective with the margin term active, wrt the fused rows
    tam_leaves = {k: T.Tensor(v) for k, v in arrays64.items()}
    tam_dims = {"heads": 2, "structure_layers": 1, "d_hid": 4, "hidden": 3}
    h_pos = T.Tensor(rng.normal(size=(3, 4)))
    h_neg = T.Tensor(rng.normal(size=(3, 4)))
    u_leaf = T.Tensor(rng.normal(size=(4, 4)))
    i_leaf = T.Tensor(rng.normal(size=(5, 4)))
    triplets = np.array([[0, 1, 2], [1, 0, 3], [2, 2, 4]])
    fusion = R.FusionConfig(coarse_k=3, top_m=2, margin_weight=0.3)
    case("fine-tune objective wrt user rows", rng.normal(size=(3, 4)),
         lambda x: R.finetune_losses(x, h_pos, h_neg, u_leaf, i_leaf,
                                     triplets, fusion,
                                     tam_leaves=tam_leaves,
                                     tam_dims=tam_dims)[0],
         step=1e-4)
    return cases


def test_gradients_match_finite_differences():
    with criterion(1, "analytic gradients match finite differences") as info:
        t0 = time.monotonic()
        worst = 0.0
        worst_name = ""
        cases = _gradient_cases()
        for name, point, f, step in cases:
            err = T.grad_check(f, point, step=step)
            if err > worst:
                worst, worst_name = err, name
            assert err < 1e-3, f"{name}: rel err {err:.3e}"
        elapsed = time.monotonic() - t0
        info["detail"] = (f"max rel err {worst:.2e} ({worst_name}) over "
                          f"{len(cases)} checks in {elapsed:.1f}s")
        assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 2. coarse retrieval against exhaustive search


def test_retrieval_matches_exhaustive_search():
    with criterion(2, "coarse top-K matches exhaustive search") as info:
        t0 = time.monotonic()
        rng = np.random.default_rng(12)
        n, d, top = 1000, 16, 10
        keys = rng.normal(size=(n, d)).astype(np.float32)
        values = [Subgraph(central=i, nodes=np.array([i]),
                           edges=np.empty((0, 2), np.int64), hop=1)
                  for i in range(n)]
        lib = SubgraphLibrary(keys=keys, values=values,
                              source_hash="0" * 64, hop=1)
        queries = rng.normal(size=(50, d)).astype(np.float32)
        for q in queries:
            got = l2_topk(lib, q, K=top)
            diff = keys.astype(np.float64) - q.astype(np.float64)
            d2 = (diff * diff).sum(axis=1)
            want = np.lexsort((np.arange(n), d2))[:top]
            assert [i for i, _ in got] == [int(i) for i in want]
            assert np.allclose([dist for _, dist in got], d2[want],
                               atol=1e-9)
        elapsed = time.monotonic() - t0
        info["detail"] = (f"{len(queries)} queries over {n} keys, "
                          f"selections identical in {elapsed:.1f}s")
        assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 3. ranking metrics against an independent reference


def _ref_recall(ranked, gt, k):
    return len(set(ranked[:k]) & gt) / len(gt)


def _ref_ndcg(ranked, gt, k):
    pos = {item: j for j, item in enumerate(ranked[:k])}
    gains = sorted(1.0 / math.log2(pos[g] + 2) for g in gt if g in pos)
    ideal = sorted(1.0 / math.log2(j + 2) for j in range(min(k, len(gt))))
    return math.fsum(gains) / math.fsum(ideal)


def test_ranking_metrics_match_reference():
    with criterion(3, "ranking metrics match the reference") as info:
        # pinned hand cases first
        assert recall_at_k({9: [0, 7, 8]}, {9: {0, 1}}, 2) == 0.5
        assert ndcg_at_k({9: [3, 7, 5]}, {9: {7}}, 3) == 1.0 / math.log2(3)

        rng = np.random.default_rng(23)
        for _ in range(1000):
            n_items = int(rng.integers(5, 50))
            k = int(rng.integers(1, 15))
            gt = set(int(i) for i in
                     rng.choice(n_items,
                                size=int(rng.integers(
                                    1, min(8, n_items + 1))),
                                replace=False))
            ranked = [int(i) for i in rng.permutation(n_items)]
            preds, truth = {0: ranked}, {0: gt}
            assert recall_at_k(preds, truth, k) == _ref_recall(ranked, gt, k)
            assert ndcg_at_k(preds, truth, k) == _ref_ndcg(ranked, gt, k)
        info["detail"] = ("1000 random instances bit-exact; hand cases "
                          f"0.5 and 1/log2(3) = {1.0 / math.log2(3):.4f}")


# ---------------------------------------------------------------------------
# 4. relevance labels against a brute-force re-derivation


def _dense_rows(table, nodes):
    u = table.user_embeddings
    i = table.item_embeddings
    return np.array([u[g] if g < len(u) else i[g - len(u)] for g in nodes],
                    dtype=np.float64)


def _dense_encode(table, nodes, edges):
    """Layer-summed central encoding recomputed with dense matrices."""
    x = _dense_rows(table, nodes)
    n = len(nodes)
    a = np.zeros((n, n))
    for p, q in edges:
        a[p, q] = a[q, p] = 1.0
    deg = a.sum(axis=1)
    dinv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    iso = deg == 0
    acc = x[0].copy()
    cur = x
    for _ in range(table.layers):
        nxt = dinv[:, None] * (a @ (dinv[:, None] * cur))
        nxt[iso] = cur[iso]
        cur = nxt
        acc = acc + cur[0]
    return acc


def _global_pairs(sg):
    if not len(sg.edges):
        return set()
    return {(int(min(a, b)), int(max(a, b))) for a, b in sg.nodes[sg.edges]}


def _fused_parts(q_sg, r_sg):
    nodes = set(int(n) for n in q_sg.nodes) | set(int(n) for n in r_sg.nodes)
    edges = _global_pairs(q_sg) | _global_pairs(r_sg)
    if q_sg.central != r_sg.central:
        edges.add(tuple(sorted((q_sg.central, r_sg.central))))
    order = [q_sg.central] + sorted(nodes - {q_sg.central})
    at = {g: l for l, g in enumerate(order)}
    local = [(min(at[a], at[b]), max(at[a], at[b])) for a, b in edges]
    return np.array(order), local


def _mean_cos(vec, others):
    sims = []
    for p in others:
        na = math.sqrt(float(vec @ vec))
        nb = math.sqrt(float(p @ p))
        sims.append(0.0 if na == 0.0 or nb == 0.0
                    else float(vec @ p) / (na * nb))
    return math.fsum(sims) / len(sims)


def test_labeling_matches_brute_force_relevance():
    with criterion(4, "relevance labels match brute force on planted "
                      "blocks") as info:
        t0 = time.monotonic()
        eps = 1e-4
        spec = SyntheticSpec(users=20, items=20, blocks=2, within_prob=0.95,
                             drift=[0, 0, 0, 0], snapshots=4,
                             events_per_snapshot=40, seed=0)
        graph = build_dynamic(generate_synthetic(spec), "daily", 3)
        table, _ = pretrain_bpr(graph, d=32, layers=2, epochs=60, lr=0.1,
                                batch_size=256, seed=0)
        lib = build_library(graph, table, k=1, cap=16, seed=0)
        hist = accumulate(graph.pretrain_snapshots())

        def block(center):
            c = int(center)
            return spec.user_block(c) if c < spec.users \
                else spec.item_block(c - spec.users)

        same, cross = Counter(), Counter()
        worst = 0.0
        centers = lib.centers
        for qi, qc in enumerate(centers):
            pos = positive_set(hist, int(qc), k=1, n_pos=8, cap=16, seed=0)
            if pos is None:
                continue
            pos_enc = [_dense_encode(table, p.nodes, p.edges)
                       for p in pos.positives]
            q_sg = lib.values[qi]
            before = _mean_cos(_dense_encode(table, q_sg.nodes, q_sg.edges),
                               pos_enc)
            for ci, cc in enumerate(centers):
                if ci == qi:
                    continue
                got = delta_rel(q_sg, lib.values[ci], pos, table, eps)
                nodes, local = _fused_parts(q_sg, lib.values[ci])
                ref = _mean_cos(_dense_encode(table, nodes, local),
                                pos_enc) - before
                worst = max(worst, abs(got.c_r - ref))
                # skip label comparison inside the float32 rounding band
                if abs(abs(ref) - eps) > 1e-5:
                    assert got.label == classify(ref, eps)
                bucket = same if block(qc) == block(cc) else cross
                bucket[got.label] += 1
        assert worst < 5e-6
        n_same, n_cross = sum(same.values()), sum(cross.values())
        frac_same = same["beneficial"] / n_same
        frac_cross = cross["harmful"] / n_cross
        elapsed = time.monotonic() - t0
        info["detail"] = (f"same-block beneficial {frac_same:.2f}, "
                          f"cross-block harmful {frac_cross:.2f}, "
                          f"max |C_r| gap {worst:.1e} over "
                          f"{n_same + n_cross} pairs in {elapsed:.0f}s")
        assert frac_same > 0.5
        assert frac_cross > 0.5
        assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 5. the relevance model learns a planted linear signal


def test_relevance_model_learns_planted_signal():
    with criterion(5, "relevance model recovers a planted signal") as info:
        t0 = time.monotonic()
        seed, d, n_train, n_test = 1, 64, 2048, 256
        rng = np.random.default_rng(seed)
        tokens = rng.normal(0.0, 1.0, (n_train + n_test, 2, d)) \
            .astype(np.float32)
        w = rng.normal(0.0, 1.0, (2, d)) / np.sqrt(2 * d)
        y = 5.0 * np.einsum("ntd,td->n", tokens.astype(np.float64), w)
        y += rng.normal(0.0, 0.02, len(y))
        tr, te = slice(0, n_train), slice(n_train, None)

        params = None
        best, reached_at = -1.0, None
        for done in range(0, 200, 25):
            params, _ = train_relevance_model(tokens[tr], y[tr], epochs=25,
                                              lr=1e-3, seed=seed,
                                              batch_size=32, params=params)
            s = float(spearmanr(score_pairs(params, tokens[te]),
                                y[te]).statistic)
            best = max(best, s)
            if s >= 0.9:
                reached_at = done + 25
                break
        elapsed = time.monotonic() - t0
        info["detail"] = (f"held-out Spearman {best:.3f} after "
                          f"{reached_at or 200} epochs in {elapsed:.0f}s "
                          f"(d={d}, lr=1e-3)")
        assert reached_at is not None and reached_at <= 200, \
            f"best held-out Spearman {best:.3f} after 200 epochs"
        assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 6 + 7. retrieval earns its keep on drifting interactions


ABLATION_CONFIG = dict(
    split=3, d=16, layers=2, heads=2, d_hid=8, score_hidden=8,
    hop=2, coarse_k=5, top_m=5, cap=64, lr=0.05, drop_rate=0.2,
    margin_weight=0.0, beta_init=0.0, pretrain_epochs=30, tam_epochs=30,
    tam_batch_size=32, finetune_epochs=30, batch_size=256, n_queries=12,
    candidates_per_query=10, n_pos=8, epsilon=1e-4, k=10)

ABLATION_VARIANTS = (("full", {}),
                     ("vanilla", {"disable_retrieval": True}),
                     ("wo-all", {"disable_semantic": True,
                                 "disable_structure": True}))


@pytest.fixture(scope="module")
def ablation_scan(tmp_path_factory):
    """Mean recall per variant for five training seeds on one drifting
    dataset. Upstream stages are shared per seed; only the fine-tune and
    evaluation stages differ between variants."""
    base = tmp_path_factory.mktemp("ablation")
    spec = SyntheticSpec(users=40, items=80, blocks=4, within_prob=0.95,
                         drift=[0, 1, 0, 1, 0, 1], snapshots=6,
                         events_per_snapshot=[200, 200, 200, 40, 40, 40],
                         seed=0)
    interactions = base / "interactions.txt"
    write_synthetic(spec, interactions, base / "blocks.txt")
    t0 = time.monotonic()
    rows = []
    for seed in range(5):
        up = base / f"s{seed}" / "up"
        cfg = RunConfig(interactions=str(interactions), output_dir=str(up),
                        seed=seed, **ABLATION_CONFIG)
        cfg.validate()
        ingest(cfg)
        for stage in STAGES[:4]:
            run_stage(stage, cfg)
        row = {"seed": seed}
        for name, flags in ABLATION_VARIANTS:
            vdir = base / f"s{seed}" / name
            shutil.copytree(up, vdir)
            vcfg = dataclasses.replace(cfg, output_dir=str(vdir), **flags)
            run_stage("finetune", vcfg)
            run_stage("evaluate", vcfg)
            report = EvalReport.load(Paths(vcfg).report(variant_name(vcfg)))
            row[name] = report.mean_recall
        rows.append(row)
    return {"rows": rows, "elapsed": time.monotonic() - t0}


def test_retrieval_improves_recall(ablation_scan):
    with criterion(6, "retrieval lifts recall over the no-retrieval "
                      "baseline") as info:
        rows = ablation_scan["rows"]
        wins = sum(r["full"] > r["vanilla"] for r in rows)
        mean_full = np.mean([r["full"] for r in rows])
        mean_van = np.mean([r["vanilla"] for r in rows])
        info["detail"] = (f"full > off on {wins}/5 seeds (mean recall "
                          f"{mean_full:.4f} vs {mean_van:.4f}, scan "
                          f"{ablation_scan['elapsed']:.0f}s)")
        assert wins >= 4, [f"{r['full']:.4f}/{r['vanilla']:.4f}"
                           for r in rows]
        assert ablation_scan["elapsed"] < 900.0


def test_full_model_not_beaten_by_ablation(ablation_scan):
    with criterion(7, "full scoring at least matches the stripped "
                      "variant") as info:
        rows = ablation_scan["rows"]
        wins = sum(r["full"] >= r["wo-all"] for r in rows)
        mean_full = np.mean([r["full"] for r in rows])
        mean_woall = np.mean([r["wo-all"] for r in rows])
        info["detail"] = (f"full >= stripped on {wins}/5 seeds (mean "
                          f"recall {mean_full:.4f} vs {mean_woall:.4f})")
        assert wins >= 4, [f"{r['full']:.4f}/{r['wo-all']:.4f}"
                           for r in rows]
        assert ablation_scan["elapsed"] < 900.0


# ---------------------------------------------------------------------------
# 8. structural invariants of the fusion path


def test_invariances_hold():
    with criterion(8, "fusion and loss invariants hold") as info:
        rng = np.random.default_rng(31)

        # selection weights live on the simplex
        for i in range(200):
            s = rng.normal(scale=3.0, size=int(rng.integers(1, 10)))
            mode = "softmax" if i % 2 else "uniform"
            a = R.alpha_weights(s, mode)
            assert np.all(a >= 0.0)
            assert abs(a.sum() - 1.0) <= 1e-6

        # gate saturation returns each branch exactly
        h_q = rng.normal(size=7).astype(np.float32)
        h_r = rng.normal(size=7).astype(np.float32)
        assert np.array_equal(R.fuse_query(h_q, h_r, 40.0), h_q)
        assert np.array_equal(R.fuse_query(h_q, h_r, -40.0), h_r)

        # selection is invariant under strictly increasing transforms
        for _ in range(40):
            s = rng.normal(size=int(rng.integers(1, 12)))
            m = int(rng.integers(1, len(s) + 1))
            base = list(R.topm_indices(s, m))
            assert list(R.topm_indices(2.0 * s + 1.0, m)) == base
            assert list(R.topm_indices(np.exp(s), m)) == base

        # row-stochastic propagation fixes the all-ones column exactly
        n = 23
        r = rng.integers(0, n, size=40)
        c = rng.integers(0, n, size=40)
        keep = r != c
        adj = sparse.csr_matrix(
            (np.ones(2 * keep.sum()),
             (np.concatenate([r[keep], c[keep]]),
              np.concatenate([c[keep], r[keep]]))), shape=(n, n))
        adj.data[:] = 1.0
        ones = np.ones((n, 1))
        assert np.array_equal(
            normalized_propagate(adj, ones, "row-stochastic"), ones)

        # the ordinal loss term ignores a uniform score shift
        def ocl(values, targets):
            tape = T.Tape()
            leaf = tape.leaf(np.asarray(values, np.float64))
            _, _, l_ocl = biscl_loss(leaf, targets, rho=0.6, tau=1.0)
            return float(l_ocl.data)

        s = rng.normal(size=6)
        t = rng.normal(size=6)
        assert ocl(s + 123.25, t) == pytest.approx(ocl(s, t), rel=1e-6)

        info["detail"] = ("simplex weights, gate saturation, monotone "
                          "re-ranking, ones fixed point, shift-invariant "
                          "ordinal term")


# ---------------------------------------------------------------------------
# 9. bit-identical reruns


def test_identical_runs_are_byte_identical(tmp_path):
    with criterion(9, "identical configurations rerun byte-identically") \
            as info:
        spec = SyntheticSpec(users=20, items=20, blocks=4, within_prob=0.9,
                             drift=[0, 1, 2, 3], snapshots=4,
                             events_per_snapshot=150, seed=5)
        interactions = tmp_path / "interactions.txt"
        write_synthetic(spec, interactions, tmp_path / "blocks.txt")
        shared = dict(interactions=str(interactions), split=2, d=8,
                      layers=1, heads=2, d_hid=4, score_hidden=4,
                      coarse_k=4, top_m=2, cap=64, pretrain_epochs=3,
                      tam_epochs=3, tam_batch_size=32, finetune_epochs=2,
                      batch_size=256, n_queries=4, candidates_per_query=4,
                      k=5, seed=5)
        cfg_a = RunConfig(output_dir=str(tmp_path / "a"), **shared)
        cfg_b = RunConfig(output_dir=str(tmp_path / "b"), **shared)
        run_all(cfg_a)
        run_all(cfg_b)
        names = ("manifest.txt", "encoder.ckpt", "library.ckpt",
                 "d_aware.txt", "tam.ckpt", "finetune_p2.ckpt",
                 "finetune_p3.ckpt", "report_full.txt",
                 "recommendations_p2_full.txt",
                 "recommendations_p3_full.txt",
                 "report_full_recall.png", "report_full_ndcg.png")
        a_root, b_root = Paths(cfg_a).root, Paths(cfg_b).root
        for name in names:
            assert (a_root / name).read_bytes() \
                == (b_root / name).read_bytes(), name
        info["detail"] = (f"{len(names)} artifacts byte-identical across "
                          "two runs, checkpoints through reports and "
                          "figures")
