"""Smoke test for the ppsr Python extension."""

import math
import pathlib
import tempfile

import ppsr

FIXTURE = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/office"


def main():
    cfg = ppsr.Config(k_p=8, rng_seed=7)
    assert cfg.k_p == 8 and cfg.rng_seed == 7 and cfg.k_s2 == 2
    assert cfg.validate() == []
    assert ppsr.Config.from_json(cfg.to_json()).k_p == 8

    assert ppsr.purchase_probability(1.0, 1.0) == 0.5
    assert abs(ppsr.purchase_probability(2.0, 0.0) - 1 / (1 + math.exp(-2))) < 1e-12
    assert abs(ppsr.cosine([1.0, 0.0], [1.0, 1.0]) - 1 / math.sqrt(2)) < 1e-12

    ranking = [f"x{i}" for i in range(1, 11)]
    ranking[4] = "T"
    assert ppsr.mrr_at_k(ranking, "T", 8) == 0.2
    assert ppsr.recall_at_k(ranking, "T", 4) == 0.0
    ranking[4], ranking[2] = ranking[2], ranking[4]
    assert ppsr.ndcg_at_k(ranking, "T", 4) == 0.5
    report = ppsr.evaluate({"a": ranking}, {"a": "T", "b": "T"}, "M@8,R@4")
    assert report == {"M@8": 1 / 6, "R@4": 0.5}, report
    assert ppsr.relative_improvement(0.398, 0.368) == 8.15
    assert ppsr.relative_improvement(0.190, 0.155) == 22.58

    vecs = {"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [0.7, 0.7]}
    history = [("a", 1), ("b", 2), ("c", 3)]
    picked = ppsr.select_history(history, [1.0, 0.1], [0.1, 1.0], vecs, 1)
    assert picked == ["c"], picked

    assert ppsr.extract_query(["Office Products", "Paper", "Cardstock"])[1] == "office products paper cardstock"
    core, counts = ppsr.aggregate_perspectives([["color", "size"], ["color"], ["price"]], 2)
    assert core == ["color", "price"] and counts["color"] == 2, (core, counts)

    backend = ppsr.MockBackend(seed=1, embedding_dim=16)
    yes, no = backend.score("Will the user purchase?")
    assert (yes, no) == backend.score("Will the user purchase?")
    assert len(backend.embed("gel pens")) == 16

    with tempfile.TemporaryDirectory() as work:
        args = ("office", FIXTURE / "metadata.jsonl", FIXTURE / "interactions.jsonl", FIXTURE / "base.jsonl", work)
        executed, skipped = ppsr.run_pipeline(*args, config=ppsr.Config(rng_seed=42))
        assert executed == ppsr.STEPS and skipped == []
        executed, skipped = ppsr.run_pipeline(*args, config=ppsr.Config(rng_seed=42))
        assert executed == [] and skipped == ppsr.STEPS
        assert (pathlib.Path(work) / "report.json").exists()

    print("python smoke test passed")


if __name__ == "__main__":
    main()
