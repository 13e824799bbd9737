import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratmoe.analysis import (
    BLOCK_COLUMNS,
    DIRECTION_COLUMNS,
    RECORD_COLUMNS,
    TOKEN_COLUMNS,
    RcRecord,
    SchemaError,
    frequency_ranks,
    rc_by_block,
    rc_by_direction,
    rc_by_token_frequency,
    read_frequencies,
    read_records,
    read_report,
    records_from_traces,
    write_frequencies,
    write_records,
    write_reports,
)
from stratmoe.data import gen_synthetic_task, make_batch
from stratmoe.model import ModelConfig, build_model, forward


def rec(hops, evals=None, src="L0", tgt="L1", side="decoder", layer=0, tok=5, split="dev"):
    return RcRecord(split, src, tgt, side, layer, tok, hops, 2 * hops if evals is None else evals)


records_st = st.lists(
    st.builds(lambda h, e, s, t, side, layer, tok: rec(h, min(e, 2 * h), s, t, side, layer, tok),
              st.integers(1, 3), st.integers(0, 6), st.sampled_from(["L0", "L1", "L2"]),
              st.sampled_from(["L0", "L1"]), st.sampled_from(["encoder", "decoder"]),
              st.sampled_from([0, 2]), st.integers(3, 12)),
    min_size=1, max_size=60)


class TestDirection:
    def test_single_record(self):
        (r,) = rc_by_direction([rec(2, 3)])
        assert r.key == ("L0", "L1", "decoder") and r.mean_hops == 2.0 and r.mean_evals == 3.0 and r.n == 1

    def test_two_directions(self):
        rows = rc_by_direction([rec(1, src="L0"), rec(2, src="L2")])
        assert [r.mean_hops for r in rows] == [1.0, 2.0]

    def test_pools_blocks_on_a_side(self):
        (r,) = rc_by_direction([rec(1, layer=0), rec(2, layer=2), rec(2, layer=2)])
        assert r.mean_hops == pytest.approx(5 / 3) and r.n == 3

    def test_empty_groups_omitted(self):
        assert rc_by_direction([]) == []

    @given(records_st)
    @settings(max_examples=50)
    def test_exact_means_and_counts(self, records):
        rows = rc_by_direction(records)
        assert sum(r.n for r in rows) == len(records)
        for r in rows:
            sel = [x for x in records if (x.src_lang, x.tgt_lang, x.side) == r.key]
            assert abs(r.mean_hops - sum(x.hops for x in sel) / len(sel)) < 1e-12
            assert abs(r.mean_evals - sum(x.expert_evals for x in sel) / len(sel)) < 1e-12


class TestBlock:
    def test_one_block(self):
        assert len(rc_by_block([rec(1), rec(2)])) == 1

    def test_encoder_first_then_layer(self):
        recs = [rec(1, side="decoder", layer=0), rec(1, side="encoder", layer=2), rec(1, side="encoder", layer=0)]
        assert [r.key for r in rc_by_block(recs)] == [("encoder", 0), ("encoder", 2), ("decoder", 0)]

    @given(records_st)
    @settings(max_examples=50)
    def test_counts_and_bounds(self, records):
        rows = rc_by_block(records)
        assert sum(r.n for r in rows) == len(records)
        assert all(1 <= r.mean_hops <= 3 and 0 <= r.mean_evals <= 6 for r in rows)


class TestTokenFrequency:
    def test_ranks(self):
        assert list(frequency_ranks(np.array([5, 9, 5, 0]))) == [1, 0, 2, 3]

    def test_always_deep_token_is_high(self):
        recs = [rec(1, tok=t) for t in range(3, 20)] + [rec(4, tok=7)] * 3
        out = rc_by_token_frequency(recs, np.ones(30), top_n=1)
        assert [r.token_id for r in out if r.group == "high"] == [7]
        assert 7 not in [r.token_id for r in out if r.group == "low"]

    def test_clamped_to_vocab(self):
        recs = [rec(1 + t % 2, tok=t) for t in range(30)]
        out = rc_by_token_frequency(recs, np.ones(30), top_n=25)
        assert len([r for r in out if r.group == "high"]) == 25

    def test_selection_by_several_blocks_listed_once(self):
        recs = [rec(3, tok=4, layer=l) for l in (0, 2, 4)] + [rec(1, tok=5, layer=l) for l in (0, 2, 4)]
        high = [r for r in rc_by_token_frequency(recs, np.ones(10), top_n=1) if r.group == "high"]
        assert [(r.token_id, r.n) for r in high] == [(4, 3)]

    def test_frequency_rank_attached(self):
        freqs = np.zeros(10)
        freqs[6] = 100
        out = rc_by_token_frequency([rec(1, tok=6)], freqs, top_n=5)
        assert {r.freq_rank for r in out} == {0}

    def test_uncovered_token(self):
        with pytest.raises(ValueError):
            rc_by_token_frequency([rec(1, tok=12)], np.ones(10))


class TestCsv:
    def test_record_round_trip(self, tmp_path):
        recs = [rec(1, 2), rec(2, 3, side="encoder", layer=2, tok=9, split="train")]
        write_records(tmp_path / "r.csv", recs)
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(RECORD_COLUMNS)
        assert read_records(tmp_path / "r.csv") == recs

    def test_missing_column_named(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("split,src_lang,tgt_lang,side,block_layer,token_id,expert_evals\n")
        with pytest.raises(SchemaError, match="'hops'"):
            read_records(p)

    def test_frequency_round_trip(self, tmp_path):
        f = np.array([3, 0, 7, 1])
        write_frequencies(tmp_path / "f.csv", f)
        assert np.array_equal(read_frequencies(tmp_path / "f.csv"), f)

    def test_reports_written_with_exact_headers(self, tmp_path):
        recs = [rec(1 + i % 2, tok=3 + i % 5, layer=2 * (i % 2)) for i in range(20)]
        paths = write_reports(recs, np.ones(10), tmp_path)
        for name, cols in [("rc_by_direction", DIRECTION_COLUMNS), ("rc_tokens", TOKEN_COLUMNS),
                           ("rc_by_block", BLOCK_COLUMNS)]:
            assert paths[name].read_text().splitlines()[0] == ",".join(cols)
            assert read_report(paths[name], cols)


def tiny_model(layout="2-2", seed=0, **kw):
    ds = gen_synthetic_task(2, 6, 4, seed=seed)
    cfg = ModelConfig(d_model=8, d_ff=8, n_heads=2, vocab_size=ds.vocab.size, layout=layout, seed=seed, **kw)
    return ds, build_model(cfg)


class TestFromTraces:
    def test_one_record_per_routed_token(self):
        ds, model = tiny_model()
        batch = make_batch(ds.examples)
        res = forward(model, batch, trace=True)
        recs = records_from_traces(res.traces, batch.src_lang, batch.tgt_lang, "train")
        n_tokens = int((batch.src != 0).sum() + (batch.tgt_in != 0).sum())
        assert len(recs) == n_tokens  # one MoE block per side
        assert all(1 <= r.hops <= 2 and 0 <= r.expert_evals <= 2 * r.hops for r in recs)
        assert {r.side for r in recs} == {"encoder", "decoder"}
        tags = {(r.src_lang, r.tgt_lang) for r in recs}
        assert tags == {(f"L{a}", f"L{b}") for a, b in ds.directions()}

    def test_encoder_tokens_match_sources(self):
        ds, model = tiny_model()
        batch = make_batch(ds.examples[:1])
        res = forward(model, batch, trace=True)
        recs = records_from_traces(res.traces, batch.src_lang, batch.tgt_lang, "dev")
        enc = [r.token_id for r in recs if r.side == "encoder"]
        assert enc == [int(t) for t in batch.src[0] if t]
