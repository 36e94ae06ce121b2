import json

import numpy as np
import pytest
import torch
from PIL import Image

from bia.data import DatasetSpec, from_arrays, load_dataset
from bia.evalsuite import (AuditError, EvalReport, EvalRow, GeneratorAttack, IdentityAttack, NoiseAttack,
                           SweepGrid, audit, augmentation_comparison, block_diff_map, evaluate_attack,
                           format_mean_std, layer_sweep, multi_seed, rank_attacks, rn_cell_id, rn_param_sweep,
                           sample_std, to_gray8, visualize_blocks)
from bia.generator import AttackBudget, GeneratorSpec, build_generator
from bia.objectives import ObjectiveKind
from bia.training import TrainConfig
from conftest import tiny_classifier

SMALL = GeneratorSpec(residual_blocks=1, base_channels=4)


def _row(attack="bia", attacked=50.0, seed=1, dataset="digits"):
    return EvalRow(attack, "smallconv", "smallres", dataset, 90.0, attacked, seed)


@pytest.fixture(scope="module")
def toy():
    source = load_dataset(DatasetSpec("shapes", size=32, seed=0, resolution=(16, 16)))
    test = load_dataset(DatasetSpec("shapes", "test", size=24, seed=0, resolution=(16, 16)))
    sub = tiny_classifier(torch.float32, class_count=10)
    return sub, source, [(sub, test)]


def test_sample_std_and_format():
    # five seeds: 56.75, 57.31, 57.13, 57.03, 57.36 -> 57.12 ± 0.24
    vals = [56.75, 57.31, 57.13, 57.03, 57.36]
    assert format_mean_std(float(np.mean(vals)), sample_std(vals)) == "57.12±0.24"
    vals = [52.56, 52.63, 52.29, 52.60, 53.41]
    assert format_mean_std(float(np.mean(vals)), sample_std(vals)) == "52.70±0.42"
    # population std would print 0.38
    assert f"{np.std(vals):.2f}" == "0.38"
    assert sample_std([1.0]) is None
    assert format_mean_std(3.14159, None) == "3.14"


def test_multi_seed_two_seeds_mean_and_std():
    vals = {1: 57.16, 2: 52.70}
    report = multi_seed(lambda s: EvalReport([_row(attacked=vals[s])]), [1, 2])
    agg = report.aggregate(attack_id="bia")
    assert abs(agg.attacked_mean - 54.93) < 1e-9
    # oracle: sample std of two values is |a-b|/sqrt(2)
    assert abs(agg.attacked_std - abs(57.16 - 52.70) / np.sqrt(2)) < 1e-12
    assert agg.cell() == "54.93±3.15"
    assert agg.seeds == (1, 2)


def test_multi_seed_overwrites_row_seed():
    report = multi_seed(lambda s: EvalReport([_row(seed=0)]), [4, 9])
    assert [r.seed for r in report.rows] == [4, 9]


def test_report_round_trip_and_table():
    report = EvalReport([_row(attacked=57.16), _row(attacked=52.70, seed=2), _row("noise", 80.0)])
    again = EvalReport.from_json(report.to_json())
    assert again.rows == report.rows
    doc = json.loads(report.to_json())
    bia = [a for a in doc["aggregates"] if a["attack_id"] == "bia"][0]
    assert bia["cell"] == "54.93±3.15"
    assert "smallres / digits / bia (smallconv) → 54.93±3.15" in report.table()
    assert report.to_csv().splitlines()[0] == "attack_id,source_arch,target_model,dataset,clean_top1," \
                                              "attacked_top1,seed,flip_rate"


def test_row_validation():
    with pytest.raises(ValueError):
        _row(attacked=101.0)


def test_audit():
    x = torch.full((1, 3, 2, 2), 0.5)
    assert audit(x + 0.01, x, 0.02) == pytest.approx(0.01)
    with pytest.raises(AuditError):
        audit(x + 0.03, x, 0.02)
    with pytest.raises(AuditError):
        audit(x * 3, x, 2.0)


def test_identity_attack_keeps_accuracy(toy):
    sub, _, targets = toy
    report = evaluate_attack(IdentityAttack(), targets, AttackBudget(10))
    (row,) = report.rows
    assert row.attacked_top1 == row.clean_top1 and row.flip_rate == 0.0


def test_constant_classifier_accuracy_is_label_frequency():
    class Constant(torch.nn.Module):
        arch_id, class_count = "const", 3

        def forward(self, x):
            return torch.tensor([[0.0, 1.0, 0.0]]).expand(x.shape[0], 3)
    imgs = [np.zeros((8, 8, 3), np.uint8)] * 8
    h = from_arrays(imgs, [1, 1, 0, 2, 1, 0, 0, 0], 3, name="toy")
    report = evaluate_attack(NoiseAttack(AttackBudget(10)), [(Constant(), h)], AttackBudget(10), batch_size=3)
    assert report.rows[0].clean_top1 == 37.5 and report.rows[0].attacked_top1 == 37.5


def test_class_count_mismatch(toy):
    sub, _, _ = toy
    h = from_arrays([np.zeros((16, 16, 3), np.uint8)], [0], 2)
    with pytest.raises(ValueError, match="classes"):
        evaluate_attack(IdentityAttack(), [(sub, h)], AttackBudget(10))


def test_evaluation_is_deterministic(toy):
    sub, _, targets = toy
    G = build_generator(SMALL, 2)
    run = lambda: evaluate_attack(GeneratorAttack(G, AttackBudget(10), "bia", "tiny", smooth=True), targets,
                                  AttackBudget(10), seed=3).to_json()
    noise = lambda: evaluate_attack(NoiseAttack(AttackBudget(10)), targets, AttackBudget(10), seed=3).to_json()
    assert run() == run() and noise() == noise()


def _cfg(**kw):
    return TrainConfig(batch_size=8, max_steps=2, seed=1, objective=ObjectiveKind.parse("bia", "stage1"), **kw)


def test_layer_sweep_single_and_duplicate_taps(toy):
    sub, source, targets = toy
    single = layer_sweep(sub, ["stage1"], source, targets, _cfg(), SMALL)
    assert [r.attack_id for r in single.rows] == ["bia@stage1"]
    twice = layer_sweep(sub, ["stage2", "stage2"], source, targets, _cfg(), SMALL)
    assert twice.rows[0] == twice.rows[1]


def test_layer_sweep_ranking(toy):
    sub, source, targets = toy
    report = layer_sweep(sub, ["stage1", "stage2"], source, targets, _cfg(), SMALL)
    ranking = rank_attacks(report)
    values = [v for _, v in ranking]
    assert values == sorted(values)
    assert {k for k, _ in ranking} == {"bia@stage1", "bia@stage2"}


def test_rn_param_sweep_grid(toy):
    sub, source, targets = toy
    grid = SweepGrid({"mu_mean": (0.25, 0.5), "sigma_mean": (0.75,)})
    heat = rn_param_sweep(grid, sub, source, targets, _cfg(), SMALL)
    assert heat.cells.shape == (2, 1)
    assert heat.cells[1, 0] == heat.report.aggregate(attack_id=rn_cell_id(0.5, 0.75)).attacked_mean
    assert heat.to_csv().splitlines()[0] == "mu_mean\\sigma_mean,0.75"
    with pytest.raises(ValueError):
        SweepGrid({"mu_mean": ()})


def test_augmentation_comparison_arms(toy):
    sub, source, targets = toy
    report = augmentation_comparison(sub, source, targets, _cfg(), SMALL)
    assert [r.attack_id for r in report.rows] == ["bia", "bia_aug", "bia_rn"]


def test_block_diff_map():
    G = build_generator(SMALL, 0)
    x = torch.rand(1, 3, 16, 16)
    assert torch.count_nonzero(block_diff_map(G, G, x)) == 0
    G2 = build_generator(SMALL, 0)
    with torch.no_grad():
        for p in G2.down.parameters():
            p.mul_(2.0)
    m = block_diff_map(G, G2, x)
    assert m.shape == (1, 1, 4, 4) and set(m.unique().tolist()) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        block_diff_map(G, build_generator(GeneratorSpec(residual_blocks=2, base_channels=4)), x)


def test_visualize_blocks(tmp_path):
    G = build_generator(SMALL, 0)
    paths = visualize_blocks(G, torch.rand(2, 3, 16, 16), tmp_path)
    assert len(paths) == len(G.block_ids) == 3
    for p in paths:
        with Image.open(p) as im:
            assert im.mode == "L"


def test_to_gray8():
    assert np.all(to_gray8(np.full((3, 3), 7.0)) == 128)
    g = to_gray8(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert g.min() == 0 and g.max() == 255 and g[0, 1] == 64
