"""
Reverse-engineering the hidden scale and shift
==============================================

A plagiarist holding the public weights freezes them and retrains free
scale/shift vectors (started at 1 and 0) on the training data. This script
runs that attack against V1, V2 and V3 protected MiniNets with the same budget.
"""

from nnpassport.attacks import AttackConfig, reverse_engineer_hidden
from nnpassport.data import synthetic_dataset
from nnpassport.models import build_model
from nnpassport.passports import gen_random_pattern
from nnpassport.training import TrainConfig, train

data = synthetic_dataset(num_classes=10, samples_per_class=100, image_size=16, seed=7)

for kind in ("V1", "V2", "V3"):
    model = build_model(kind=kind)
    model.bind(gen_random_pattern(model, seed=3))
    a_p = train(model, data, TrainConfig(epochs=8, batch_size=32, seed=0)).test_accuracy
    row = []
    for budget in (0, 2, 5):
        _, rep = reverse_engineer_hidden(model, data, AttackConfig("RevEng", budget_epochs=budget, seed=1))
        row.append(f"{budget} ep: {rep.accuracies[0]:5.1f}")
    print(f"{kind}  A_p = {a_p:5.1f}   recovered  " + "   ".join(row))
