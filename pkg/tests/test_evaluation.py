import csv
import json
import random
from fractions import Fraction

import pytest

from protofuse.corpus import Dataset, DomainManifest, Example, LabelDef
from protofuse.encoder import EncoderConfig
from protofuse.evaluation import (
    EvaluationReport,
    CellResult,
    ProtocolSpec,
    Recipe,
    emit_report,
    macro_f1,
    make_recipe,
    run_protocol,
    select_hyperparams,
)
from conftest import make_domain

CFG = EncoderConfig(d_model=16, n_layers=1, n_heads=2, max_len=16, dropout=0.0, seed=0)


def rational_macro_f1(preds, golds, n_classes):
    """Independent oracle: confusion matrix, P and R separately, rational."""
    conf = [[0] * n_classes for _ in range(n_classes)]
    for p, g in zip(preds, golds):
        conf[g][p] += 1
    total = Fraction(0)
    for c in range(n_classes):
        tp = conf[c][c]
        pred_pos = sum(conf[g][c] for g in range(n_classes))
        actual_pos = sum(conf[c])
        precision = Fraction(tp, pred_pos) if pred_pos else Fraction(0)
        recall = Fraction(tp, actual_pos) if actual_pos else Fraction(0)
        if precision + recall > 0:
            total += 2 * precision * recall / (precision + recall)
    return float(total / n_classes)


class TestMacroF1:
    def test_worked_example(self):
        golds = [0, 1, 1, 1]
        preds = [0, 0, 1, 1]
        assert abs(macro_f1(preds, golds, 2) - 0.73333333) < 1e-6

    def test_perfect(self):
        assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_total_swap_zero(self):
        assert macro_f1([1, 0, 1, 0], [0, 1, 0, 1], 2) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            macro_f1([0], [0, 1], 2)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            macro_f1([5], [0], 2)

    def test_exact_agreement_with_oracle(self):
        rng = random.Random(77)
        for _ in range(1000):
            n_classes = rng.randint(2, 6)
            n = rng.randint(1, 50)
            golds = [rng.randrange(n_classes) for _ in range(n)]
            preds = [rng.randrange(n_classes) for _ in range(n)]
            assert macro_f1(preds, golds, n_classes) == rational_macro_f1(
                preds, golds, n_classes
            )

    def test_class_permutation_invariance(self):
        rng = random.Random(3)
        for _ in range(50):
            n_classes = rng.randint(2, 5)
            n = rng.randint(2, 30)
            golds = [rng.randrange(n_classes) for _ in range(n)]
            preds = [rng.randrange(n_classes) for _ in range(n)]
            perm = list(range(n_classes))
            rng.shuffle(perm)
            a = macro_f1(preds, golds, n_classes)
            b = macro_f1([perm[p] for p in preds], [perm[g] for g in golds], n_classes)
            assert a == b

    def test_range(self):
        rng = random.Random(9)
        for _ in range(200):
            n_classes = rng.randint(2, 6)
            n = rng.randint(1, 40)
            golds = [rng.randrange(n_classes) for _ in range(n)]
            preds = [rng.randrange(n_classes) for _ in range(n)]
            assert 0.0 <= macro_f1(preds, golds, n_classes) <= 1.0


class TestRecipes:
    def test_unknown_name(self):
        with pytest.raises(ValueError, match="valid recipes"):
            make_recipe("roberta_big")

    def test_table_defaults(self):
        r = make_recipe("mldg")
        assert r.head_lr(64) == 7e-3
        assert r.head_lr(256) == 5e-4
        assert r.head_lr(999) == 5e-3  # default key
        pm = make_recipe("protomaml")
        assert pm.finetune_epochs == 4
        assert pm.head_lr(16) == 1e-4
        je = make_recipe("je_protonet")
        assert je.fusion.kind == "joint" and je.lr_attention == 2e-5

    def test_override(self):
        r = make_recipe("untrained", finetune_epochs=1, encoder_config=CFG)
        assert r.finetune_epochs == 1
        assert r.encoder_config.d_model == 16


class TestRunProtocol:
    def _spec(self, **kw):
        domain = make_domain(counts=(40, 40), seed=1)
        recipe = make_recipe(
            "untrained", encoder_config=CFG, finetune_epochs=kw.pop("epochs", 1)
        )
        return ProtocolSpec(
            test_domain=domain,
            recipe=recipe,
            k_values=kw.pop("k_values", (4,)),
            seeds=kw.pop("seeds", (1,)),
            holdout_fraction=0.2,
            **kw,
        )

    def test_single_cell_accounting(self):
        report = run_protocol(self._spec())
        assert report.finetune_count == 1
        assert len(report.cells) == 1
        assert report.cells[0].f1 is not None

    def test_grid_accounting(self):
        report = run_protocol(self._spec(k_values=(2, 4), seeds=(1, 2, 3)))
        assert report.finetune_count == 6
        assert len(report.cells) == 6
        assert {(c.k, c.seed) for c in report.cells} == {
            (k, s) for k in (2, 4) for s in (1, 2, 3)
        }

    def test_deterministic_reports(self):
        a = run_protocol(self._spec(k_values=(2,), seeds=(1, 2)))
        b = run_protocol(self._spec(k_values=(2,), seeds=(1, 2)))
        assert a.to_json_dict() == b.to_json_dict()

    def test_constant_prediction_dummy(self):
        # A recipe with zero epochs keeps the random head; force constant
        # predictions by scoring a fabricated report instead: balanced
        # 2-class holdout with all-one-class predictions gives macro-F1 1/3.
        golds = [0] * 10 + [1] * 10
        preds = [0] * 20
        assert abs(macro_f1(preds, golds, 2) - 1 / 3) < 1e-6

    def test_failed_cell_recorded(self):
        # k larger than a class's train side -> that cell fails, others run.
        spec = self._spec(k_values=(2, 64), seeds=(1,))
        report = run_protocol(spec)
        by_k = {c.k: c for c in report.cells}
        assert by_k[2].f1 is not None
        assert by_k[64].f1 is None
        assert "class" in by_k[64].error
        summary = {row["k"]: row for row in report.summary}
        assert summary[64]["missing"] == 1
        assert summary[64]["mean"] is None

    def test_missing_checkpoint_rejected(self):
        domain = make_domain(counts=(20, 20))
        recipe = make_recipe("protonet", encoder_config=CFG)
        spec = ProtocolSpec(test_domain=domain, recipe=recipe, k_values=(2,), seeds=(1,))
        with pytest.raises(ValueError, match="checkpoint"):
            run_protocol(spec)

    def test_prototype_recipe_via_untrained_je(self):
        domain = make_domain(counts=(24, 24), seed=5)
        recipe = make_recipe(
            "je_protonet_untrained",
            encoder_config=CFG,
            joint_heads=2,
            finetune_epochs=1,
        )
        spec = ProtocolSpec(
            test_domain=domain, recipe=recipe, k_values=(4,), seeds=(1,),
        )
        report = run_protocol(spec)
        assert report.cells[0].error is None
        assert 0.0 <= report.cells[0].f1 <= 1.0


class TestSelectHyperparams:
    def _domain(self):
        # 64-per-class validation slice must fit in the remainder.
        return make_domain(counts=(80, 80), seed=2)

    def test_single_candidate(self):
        r = make_recipe("untrained", encoder_config=CFG, finetune_epochs=1)
        assert select_hyperparams([r], self._domain(), seed=1, k=8) is r

    def test_trained_beats_untrained(self):
        lazy = make_recipe("untrained", encoder_config=CFG, finetune_epochs=0)
        keen = make_recipe(
            "untrained", encoder_config=CFG, finetune_epochs=8,
            lr_encoder=1e-2, head_lr_by_k={-1: 1e-1}, batch_size=8,
        )
        best = select_hyperparams([lazy, keen], self._domain(), seed=1, k=8)
        assert best is keen

    def test_tie_breaks_first(self):
        r1 = make_recipe("untrained", encoder_config=CFG, finetune_epochs=0)
        r2 = make_recipe("untrained", encoder_config=CFG, finetune_epochs=0)
        best = select_hyperparams([r1, r2], self._domain(), seed=1, k=8)
        assert best is r1

    def test_empty_candidates(self):
        with pytest.raises(ValueError, match="candidate"):
            select_hyperparams([], self._domain(), seed=1)


class TestEmitReport:
    def _report(self, cells=None):
        cells = cells or [
            CellResult(k=16, seed=s, f1=0.5 + 0.01 * s) for s in range(1, 6)
        ] + [CellResult(k=32, seed=s, f1=0.6 + 0.01 * s) for s in range(1, 6)]
        ks = sorted({c.k for c in cells})
        summary = []
        for k in ks:
            scores = [c.f1 for c in cells if c.k == k and c.f1 is not None]
            mean = sum(scores) / len(scores) if scores else None
            summary.append({"k": k, "mean": mean, "std": 0.0, "missing": 0})
        return EvaluationReport(
            recipe="untrained",
            domain_id="dom",
            config={"domain_id": "dom"},
            cells=cells,
            summary=summary,
            finetune_count=len(cells),
            created_at="now",
        )

    def test_csv_rows(self, tmp_path):
        paths = emit_report(self._report(), tmp_path)
        rows = list(csv.reader(open(paths["csv"])))
        assert rows[0] == ["k", "seed", "macro_f1"]
        assert len(rows) == 11
        assert paths["plot"].exists()
        payload = json.loads(paths["json"].read_text())
        assert set(payload) == {"recipe", "config", "cells", "summary"}

    def test_missing_cell_flagged(self, tmp_path):
        cells = [
            CellResult(k=16, seed=1, f1=0.7),
            CellResult(k=16, seed=2, f1=None, error="boom"),
        ]
        paths = emit_report(self._report(cells), tmp_path)
        rows = list(csv.reader(open(paths["csv"])))
        assert rows[2][2] == ""
        payload = json.loads(paths["json"].read_text())
        missing = [c for c in payload["cells"] if c["f1"] is None]
        assert missing and missing[0]["error"] == "boom"

    def test_empty_report_rejected(self, tmp_path):
        report = self._report()
        report.cells = []
        with pytest.raises(ValueError, match="no cells"):
            emit_report(report, tmp_path)

    def test_filenames(self, tmp_path):
        paths = emit_report(self._report(), tmp_path)
        assert paths["json"].name == "dom_untrained.json"
        assert paths["png" if False else "plot"].name == "dom_untrained.png"
