import math

import pytest
import torch

from chronorec.config import ModelConfig, TimeEncoderConfig, ToiConfig
from chronorec.model import (
    MultiHeadSelfAttention,
    RecModel,
    last_real_index,
    load_checkpoint,
    save_checkpoint,
)

D = 8


def tiny_model(kind="gaussian", toi=True, vocab=9, max_len=5, seed=0, layers=1, **model_kw):
    mc = ModelConfig(d=D, layers=layers, heads=2, ffn_mult=2, dtype="float64", init_seed=seed, **model_kw)
    tc = TimeEncoderConfig(kind=kind, sigma=0.1, seed=seed)
    oc = ToiConfig(enabled=toi and kind != "position", gamma=0.5)
    return RecModel(mc, tc, oc, vocab, max_len)


def batch_for(model, items, times):
    mask = [[i != 0 for i in row] for row in items]
    return (
        torch.tensor(items, dtype=torch.long),
        torch.tensor(times, dtype=torch.float64),
        torch.tensor(mask, dtype=torch.bool),
    )


# --- embedding lookup ------------------------------------------------------------


def test_lookup_padding_row_is_zero():
    model = tiny_model()
    out = model.item_emb(torch.tensor([0]))
    assert torch.equal(out, torch.zeros(1, D, dtype=torch.float64))


def test_lookup_repeated_index_gives_identical_rows():
    model = tiny_model()
    out = model.item_emb(torch.tensor([3, 3]))
    assert torch.equal(out[0], out[1])


def test_lookup_gather_composes():
    model = tiny_model()
    idx = torch.tensor([1, 4, 7])
    batch = model.item_emb(idx)
    singles = torch.stack([model.item_emb(torch.tensor(i)) for i in (1, 4, 7)])
    assert torch.equal(batch, singles)


def test_lookup_out_of_range_raises():
    model = tiny_model(vocab=5)
    with pytest.raises(IndexError):
        model.item_emb(torch.tensor([6]))


def test_init_is_uniform_in_bound_and_seed_reproducible():
    m1 = tiny_model(seed=4)
    m2 = tiny_model(seed=4)
    m3 = tiny_model(seed=5)
    bound = 1 / math.sqrt(D)
    for name, p in m1.named_parameters():
        if p.dim() >= 2 or name == "uncond_token":  # embeddings and projections
            assert torch.all(p <= bound) and torch.all(p >= -bound)
    assert torch.equal(m1.item_emb.weight, m2.item_emb.weight)
    assert not torch.equal(m1.item_emb.weight, m3.item_emb.weight)


# --- encoder forward ----------------------------------------------------------------


def test_one_layer_with_zeroed_residual_branches_is_layernorm_of_input():
    model = tiny_model(layers=1)
    with torch.no_grad():
        block = model.encoder.blocks[0]
        block.attn.out_proj.weight.zero_()
        block.attn.out_proj.bias.zero_()
        block.ffn[2].weight.zero_()
        block.ffn[2].bias.zero_()
    items, times, mask = batch_for(model, [[0, 0, 0, 0, 3]], [[0, 0, 0, 0, 0.4]])
    fused, _ = model.embed_history(items, times, mask)
    g = model.encode(fused, mask)
    expected = torch.nn.functional.layer_norm(fused[0, 4], (D,))
    assert torch.allclose(g[0], expected, atol=1e-12)


def test_padding_prefix_never_changes_user_representation():
    model = tiny_model(layers=2)
    items1, times1, mask1 = batch_for(model, [[0, 0, 2, 5]], [[0, 0, 0.2, 0.6]])
    items2, times2, mask2 = batch_for(model, [[0, 2, 5, 0]], [[0, 0.2, 0.6, 0]])
    # same real content, once left-padded and once with trailing padding
    g1 = model.encode(*model.embed_history(items1, times1, mask1)[:1], mask1)
    g2 = model.encode(model.embed_history(items2, times2, mask2)[0], mask2)
    assert torch.allclose(g1, g2, atol=1e-12)


def test_attention_weights_sum_to_one_per_query():
    attn = MultiHeadSelfAttention(D, 2, 0.0).to(torch.float64)
    x = torch.randn(1, 2, D, dtype=torch.float64)
    mask = torch.ones(1, 2, dtype=torch.bool)
    _, weights = attn(x, mask, return_weights=True)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(1, 2, 2, dtype=torch.float64), atol=1e-12)


def test_swapping_non_padding_items_changes_representation():
    model = tiny_model(layers=2)
    items1, times1, mask1 = batch_for(model, [[1, 2, 3]], [[0.1, 0.5, 0.9]])
    items2, times2, mask2 = batch_for(model, [[2, 1, 3]], [[0.1, 0.5, 0.9]])
    g1 = model.encode(model.embed_history(items1, times1, mask1)[0], mask1)
    g2 = model.encode(model.embed_history(items2, times2, mask2)[0], mask2)
    assert not torch.allclose(g1, g2, atol=1e-6)


def test_all_padding_sequence_rejected():
    model = tiny_model()
    items, times, mask = batch_for(model, [[0, 0, 0]], [[0, 0, 0]])
    fused = model.item_emb(items)
    with pytest.raises(ValueError):
        model.encoder(fused, mask)


def test_last_real_index():
    mask = torch.tensor([[False, True, True], [True, False, False], [True, True, True]])
    assert last_real_index(mask).tolist() == [2, 0, 2]


def test_deterministic_forward_in_eval_mode():
    model = tiny_model(layers=2)
    model.eval()
    items, times, mask = batch_for(model, [[0, 1, 2, 3]], [[0, 0.1, 0.2, 0.3]])
    g1 = model.user_state(items, times, mask)
    g2 = model.user_state(items, times, mask)
    assert torch.equal(g1.g, g2.g) and torch.equal(g1.g_prime, g2.g_prime)


# --- position-table variant -------------------------------------------------------------


def test_position_kind_uses_learned_table_and_rejects_toi():
    model = tiny_model(kind="position", toi=False)
    items, times, mask = batch_for(model, [[0, 2, 4]], [[0, 0, 0]])
    fused, tau_prev = model.embed_history(items, times, mask)
    assert tau_prev is None
    expected = math.sqrt(D) * model.item_emb(items)[0, 1] + model.pos_emb.weight[1]
    assert torch.allclose(fused[0, 1], expected, atol=1e-15)
    with pytest.raises(ValueError):
        RecModel(
            ModelConfig(d=D, dtype="float64"),
            TimeEncoderConfig(kind="position"),
            ToiConfig(enabled=True),
            5,
            4,
        )


# --- next-time prediction and fusion ------------------------------------------------------


def test_zeroed_final_layer_gives_zero_time_prediction():
    model = tiny_model()
    with torch.no_grad():
        model.time_predictor.net[2].weight.zero_()
        model.time_predictor.net[2].bias.zero_()
    g = torch.randn(3, D, dtype=torch.float64)
    tau_prev = torch.randn(3, D, dtype=torch.float64)
    assert torch.equal(model.predict_time(g, tau_prev), torch.zeros(3, D, dtype=torch.float64))


def test_time_predictor_matches_manual_two_layer_forward():
    model = tiny_model()
    g = torch.randn(1, D, dtype=torch.float64)
    tau_prev = torch.randn(1, D, dtype=torch.float64)
    out = model.predict_time(g, tau_prev)
    x = torch.cat([g, tau_prev], dim=-1)
    w1, b1 = model.time_predictor.net[0].weight, model.time_predictor.net[0].bias
    w2, b2 = model.time_predictor.net[2].weight, model.time_predictor.net[2].bias
    hidden = torch.nn.functional.gelu(x @ w1.T + b1)
    expected = hidden @ w2.T + b2
    assert torch.allclose(out, expected, atol=1e-14)


def test_time_prediction_is_deterministic():
    model = tiny_model()
    g = torch.randn(2, D, dtype=torch.float64)
    tau = torch.randn(2, D, dtype=torch.float64)
    assert torch.equal(model.predict_time(g, tau), model.predict_time(g, tau))


def test_enrich_gamma_endpoints_and_convexity():
    model = tiny_model()
    g = torch.randn(4, D, dtype=torch.float64)
    tau_hat = torch.randn(4, D, dtype=torch.float64)
    fused = model.fusion(g, tau_hat)

    model.toi_cfg.gamma = 0.0
    assert torch.equal(model.enrich(g, tau_hat), g)
    model.toi_cfg.gamma = 1.0
    assert torch.equal(model.enrich(g, tau_hat), fused)
    model.toi_cfg.gamma = 0.8  # strong-residual operating point
    expected = 0.2 * g + 0.8 * fused
    assert torch.allclose(model.enrich(g, tau_hat), expected, atol=1e-15)
    model.toi_cfg.gamma = 0.5
    midpoint = 0.5 * (g + fused)
    assert torch.allclose(model.enrich(g, tau_hat), midpoint, atol=1e-15)


def test_tau_prev_is_time_embedding_of_most_recent_interaction():
    model = tiny_model()
    items, times, mask = batch_for(model, [[0, 3, 6]], [[0.0, 0.25, 0.75]])
    _, tau_prev = model.embed_history(items, times, mask)
    expected = model.time_encoder(torch.tensor(0.75, dtype=torch.float64))
    assert torch.allclose(tau_prev[0], expected, atol=0)


# --- candidate scoring ---------------------------------------------------------------------


def set_orthonormal_table(model):
    with torch.no_grad():
        table = torch.zeros_like(model.item_emb.weight)
        for i in range(1, model.vocab_size + 1):
            table[i, i - 1] = 1.0
        model.item_emb.weight.copy_(table)


def test_score_query_equal_to_item_embedding_wins():
    model = tiny_model(vocab=D - 1)
    set_orthonormal_table(model)
    query = model.item_emb.weight[4]
    scores = model.score_candidates(query)
    assert scores[1:].argmax().item() + 1 == 4


def test_zero_query_scores_all_zero():
    model = tiny_model()
    scores = model.score_candidates(torch.zeros(D, dtype=torch.float64))
    assert torch.equal(scores, torch.zeros(model.vocab_size + 1, dtype=torch.float64))


def test_scores_match_per_item_dot_oracle():
    model = tiny_model(vocab=5)
    query = torch.randn(D, dtype=torch.float64)
    scores = model.score_candidates(query)
    table = model.item_emb.weight.detach()
    for i in range(6):
        expected = float((query * table[i]).sum())
        assert scores[i].item() == pytest.approx(expected, abs=1e-12)


def test_cosine_ranking_mode_is_scale_invariant():
    model = tiny_model(ranking="cosine")
    query = torch.randn(D, dtype=torch.float64)
    s1 = model.score_candidates(query)
    s2 = model.score_candidates(3.7 * query)
    assert torch.allclose(s1[1:], s2[1:], atol=1e-12)


# --- checkpoint container --------------------------------------------------------------------


def test_checkpoint_roundtrip_restores_forward_exactly(tmp_path):
    model = tiny_model(kind="rff")
    model.eval()
    items, times, mask = batch_for(model, [[0, 1, 2]], [[0.0, 0.3, 0.9]])
    state = model.user_state(items, times, mask)
    path = str(tmp_path / "ckpt.pt")
    save_checkpoint(path, model, extra={"vocab_sha256": "abc"})
    restored, extra = load_checkpoint(path)
    assert extra["vocab_sha256"] == "abc"
    assert torch.equal(restored.time_encoder.freqs, model.time_encoder.freqs)
    state2 = restored.user_state(items, times, mask)
    assert torch.equal(state.g_prime, state2.g_prime)


def test_checkpoint_version_is_checked(tmp_path):
    model = tiny_model()
    path = str(tmp_path / "ckpt.pt")
    save_checkpoint(path, model)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 999
    torch.save(payload, path)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
