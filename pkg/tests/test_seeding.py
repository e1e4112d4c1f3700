"""Synthetic warehouse seeding: counts, determinism, noise, injections."""

from __future__ import annotations

import json

import pytest

from gatelens.analytics import collect_predictions, compute_metrics
from gatelens.consistency import ConsistencyChecker
from gatelens.seeding import SeedSpec, Seeder, load_truth, seed_warehouse
from gatelens.store import Store


def fresh_store(tmp_path, manifest, name):
    s = Store(tmp_path / name, manifest)
    s.migrate()
    return s


class TestCounts:
    def test_three_orgs_by_hundred(self, tmp_path, manifest):
        store = fresh_store(tmp_path, manifest, "counts.db")
        spec = SeedSpec(organizations=3, sessions_per_org=100, seed=3)
        result = Seeder(store, spec).run()
        assert len(result.session_ids) == 300
        assert store.bundle_count() == 300
        assert store.execute("SELECT COUNT(*) AS n FROM gateway_metrics")[0]["n"] == 300
        assert store.execute("SELECT COUNT(*) AS n FROM sessions")[0]["n"] == 300
        orgs = store.execute("SELECT DISTINCT org_id FROM sessions ORDER BY org_id")
        assert [o["org_id"] for o in orgs] == ["org-a", "org-b", "org-c"]
        store.close()

    def test_costs_loaded_for_roster(self, tmp_path, manifest):
        store = fresh_store(tmp_path, manifest, "roster.db")
        Seeder(store, SeedSpec(organizations=1, sessions_per_org=5, seed=1)).run()
        rows = store.execute("SELECT COUNT(*) AS n FROM model_provider")
        assert rows[0]["n"] == 4
        store.close()

    def test_refuses_nonempty_warehouse(self, tmp_path, manifest):
        store = fresh_store(tmp_path, manifest, "dirty.db")
        Seeder(store, SeedSpec(organizations=1, sessions_per_org=2, seed=1)).run()
        with pytest.raises(RuntimeError, match="refuse"):
            seed_warehouse(store, SeedSpec(organizations=1, sessions_per_org=2, seed=1))
        store.close()


class TestNoiseAndTruth:
    def test_zero_noise_scores_perfectly_against_own_truth(self, tmp_path, manifest):
        store = fresh_store(tmp_path, manifest, "clean.db")
        truth_path = tmp_path / "truth.json"
        spec = SeedSpec(organizations=2, sessions_per_org=20, seed=9, noise_rate=0.0)
        Seeder(store, spec).run(truth_path)
        truth = load_truth(truth_path)
        predictions = collect_predictions(store)
        report = compute_metrics(predictions, truth, manifest)
        assert report.error_rate == 0.0
        assert report.boolean_micro_f1 == 1.0
        store.close()

    def test_noise_moves_error_rate_off_zero(self, tmp_path, manifest):
        store = fresh_store(tmp_path, manifest, "noisy.db")
        truth_path = tmp_path / "truth.json"
        spec = SeedSpec(organizations=2, sessions_per_org=20, seed=9, noise_rate=0.05)
        Seeder(store, spec).run(truth_path)
        report = compute_metrics(collect_predictions(store), load_truth(truth_path), manifest)
        assert 0.0 < report.error_rate < 0.2
        store.close()

    def test_noisy_warehouse_stays_consistent_without_injections(self, tmp_path, manifest):
        store = fresh_store(tmp_path, manifest, "noisy2.db")
        spec = SeedSpec(organizations=3, sessions_per_org=40, seed=21, noise_rate=0.08)
        Seeder(store, spec).run()
        report = ConsistencyChecker(store).check_all()
        assert report.inconsistent_session_count == 0
        store.close()

    @pytest.mark.parametrize("k", [0, 2, 6])
    def test_injected_violation_counts_are_exact(self, tmp_path, manifest, k):
        store = fresh_store(tmp_path, manifest, f"inject-{k}.db")
        spec = SeedSpec(organizations=2, sessions_per_org=30, seed=13,
                        noise_rate=0.05, injected_violations=k)
        result = Seeder(store, spec).run()
        assert len(result.injected_session_ids) == k
        report = ConsistencyChecker(store).check_all()
        assert report.inconsistent_session_count == k
        assert {v.session_id for v in report.violations} == set(result.injected_session_ids)
        store.close()


class TestDeterminism:
    def test_same_seed_reproduces_truth_bytes_and_rows(self, tmp_path, manifest):
        spec_kwargs = dict(organizations=2, sessions_per_org=15, seed=77,
                           noise_rate=0.03, injected_violations=1)
        dumps = []
        truths = []
        for run in range(2):
            store = fresh_store(tmp_path, manifest, f"det-{run}.db")
            truth_path = tmp_path / f"truth-{run}.json"
            Seeder(store, SeedSpec(**spec_kwargs)).run(truth_path)
            truths.append(truth_path.read_bytes())
            tables = ("context_info", "llm_response_info", "issue_attribution",
                      "evaluation", "gateway_metrics", "sessions")
            dump = {t: store.execute(f"SELECT * FROM {t} ORDER BY rowid") for t in tables}
            dumps.append(json.dumps(dump, sort_keys=True))
            store.close()
        assert truths[0] == truths[1]
        assert dumps[0] == dumps[1]

    def test_different_seeds_differ(self, tmp_path, manifest):
        outs = []
        for seed in (1, 2):
            store = fresh_store(tmp_path, manifest, f"seed-{seed}.db")
            truth_path = tmp_path / f"t-{seed}.json"
            Seeder(store, SeedSpec(organizations=1, sessions_per_org=10, seed=seed)).run(truth_path)
            outs.append(truth_path.read_bytes())
            store.close()
        assert outs[0] != outs[1]


class TestSpecParsing:
    def test_from_json_roundtrip(self):
        doc = {
            "organizations": 2,
            "sessions_per_org": 4,
            "seed": 5,
            "noise_rate": 0.1,
            "models": [{
                "model_id": "m", "provider_id": "p",
                "input_cost_per_million_token": 0.5,
                "output_cost_per_million_token": 1.5,
                "quality": {"high": 0.5, "medium": 0.5, "low": 0.0},
                "quality_by_complexity": {"simple": {"high": 1.0, "medium": 0.0, "low": 0.0}},
            }],
        }
        spec = SeedSpec.from_json(doc)
        assert spec.models[0].quality_dist("simple") == {"high": 1.0, "medium": 0.0, "low": 0.0}
        assert spec.models[0].quality_dist("complex")["high"] == 0.5

    def test_invalid_rates_rejected(self):
        with pytest.raises(ValueError):
            SeedSpec(noise_rate=1.5)
        with pytest.raises(ValueError):
            SeedSpec(sessions_per_org=0)
