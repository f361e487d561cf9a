"""
Settling an ownership dispute from the command line
===================================================

The owner trains and records evidence; a suspect copy is then checked with
the true passport, a forged random passport, and a noisy copy of the passport.
Uses the ``nnpassport`` CLI the way an operator would.
"""

import subprocess
import sys
import tempfile
from pathlib import Path

from nnpassport.passports import gen_random_pattern, perturb_passport
from nnpassport.persistence import load_checkpoint, load_passport, save_passport


def nnpassport(*args):
    done = subprocess.run([sys.executable, "-m", "nnpassport", *args], capture_output=True, text=True)
    print(f"$ nnpassport {' '.join(args)}\n{done.stdout}{done.stderr}-> exit {done.returncode}\n")
    return done.returncode


work = Path(tempfile.mkdtemp())
run = work / "owner"
small = ["--override", "dataset.samples_per_class=100", "--override", "train.epochs=8",
         "--override", "passport.type=random_image", "--override", "passport.num_images=4",
         "--override", "signature.seeds_per_point=5"]

nnpassport("train", "--out", str(run), "--baseline", *small)
nnpassport("attack", "--out", str(run), "--kind", "T1", "--kind", "T3", "--trials", "50")

# the owner presents the real passport
nnpassport("verify", "--out", str(run))

# a forger presents a random passport
model = load_checkpoint(run / "model.ckpt")
save_passport(gen_random_pattern(model, 12345), work / "forged.nnpp")
nnpassport("verify", "--out", str(run), "--passport", str(work / "forged.nnpp"), "--verdict", str(work / "forged.json"))

# a passport with 30% of its elements disturbed no longer matches M_p
noisy = perturb_passport(load_passport(run / "passport.nnpp"), 0.3, 7)
save_passport(noisy, work / "noisy.nnpp")
nnpassport("verify", "--out", str(run), "--passport", str(work / "noisy.nnpp"), "--verdict", str(work / "noisy.json"))

nnpassport("report", "--out", str(work))
