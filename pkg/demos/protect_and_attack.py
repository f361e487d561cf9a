"""
Protecting a small CNN with a digital passport
==============================================

Train a passport-free MiniNet and a V3-protected twin on the synthetic
oriented-bar task, then present the protected network with fake passports.
Runs in about a minute on one CPU.
"""

import numpy as np

from nnpassport.attacks import AttackConfig, fake_passport_attack
from nnpassport.data import synthetic_dataset
from nnpassport.models import build_model
from nnpassport.passports import gen_feature_map_passport, guess_space_size
from nnpassport.training import TrainConfig, train
from nnpassport.verify import MetricsRecord, classify_protection, export_histogram, signature_curve

data = synthetic_dataset(num_classes=10, samples_per_class=100, image_size=16, seed=7)
recipe = TrainConfig(epochs=8, batch_size=32, seed=0)
print(f"{len(data.train_y)} training images, {len(data.test_y)} test images, chance {data.chance:.0f}%")

# the passport-free twin doubles as the reference network for feature-map passports
plain = build_model(kind=None)
a_o = train(plain, data, recipe).test_accuracy

# four candidate images; every passport layer picks one of them at random
protected = build_model(kind="V3")
passport = gen_feature_map_passport(plain, data.train_x[:4], "random", seed=1, kind="V3", image_ids=[0, 1, 2, 3])
protected.bind(passport)
a_p = train(protected, data, recipe).test_accuracy
print(f"A_o = {a_o:.1f}%   A_p = {a_p:.1f}%   layer choices {passport.layer_choices}")
print(f"guessing the combination: 1 in {guess_space_size(4, passport.num_passport_layers)}")

# %% fake passports
reports = {
    "T1": fake_passport_attack(protected, data, AttackConfig("T1", num_trials=100, seed=2)),
    "T2": fake_passport_attack(protected, data, AttackConfig("T2", num_trials=20, seed=2, t2_pool=data.test_x[:50]),
                               plain),
    "T3": fake_passport_attack(protected, data, AttackConfig("T3", num_trials=20, seed=2, t3_images=data.train_x[:4]),
                               plain),
}
for kind, rep in reports.items():
    record = MetricsRecord(a_o, a_p, rep.accuracies)
    verdict = classify_protection(record)
    print(f"{kind}: fake accuracy {rep.mean:5.1f} ({rep.std:.1f})  S = {record.strength:5.1f}  "
          f"well protected: {verdict.well_protected}")

export_histogram(reports["T1"].accuracies, 2.0, "t1_histogram.csv", a_o=a_o, a_p=a_p)

# %% signature curve: accuracy as more and more passport elements are corrupted
curve = signature_curve(protected, passport, data, seeds_per_point=5)
for c, m, s in zip(curve.grid, curve.means, curve.stds):
    print(f"c = {c:4.2f}  accuracy {m:5.1f} +- {s:.1f}")
print(f"Spearman rho = {curve.spearman():.2f}")
