"""
Searching slice sizes per block
===============================

Train a weight-sharing supernet with two searchable blocks on strongly
horizontal shapes, then compare the evolutionary search with brute-force
enumeration of all 16 genotypes.
"""
import sys
from pathlib import Path

from slicescan.data import SynthSpec, load_dataset, split_search, synth_generate
from slicescan.nas import EvolutionConfig, evolve, exhaustive_search, train_supernet
from slicescan.network import desk_config
from slicescan.training import TrainConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
manifest = split_search(synth_generate(SynthSpec(count=20, anisotropy=-1.0, seed=11), out / "horizontal"), 0.8)
train, search = load_dataset(manifest, "train"), load_dataset(manifest, "search")

config = desk_config(encoder_depths=(1, 0, 0, 0), decoder_depths=(0, 0, 0, 1))
supernet = train_supernet(config, TrainConfig(epochs=30, t_max=30, initial_lr=3e-3, augment=False), train)
print("first sampled genotypes:", [str(g) for _, _, g in supernet.genotype_log[:4]])

ranking = exhaustive_search(supernet.model, search)
for genotype, dsc in ranking[:5]:
    print(f"{genotype}  {dsc:.4f}")

best, log = evolve(supernet.model, search, EvolutionConfig(population_size=16, parents_kept=4, iterations=10))
print("evolve picked", best, "after", log.n_evaluations, "evaluations and", log.cache_hits, "cache hits")
print("gap to the exhaustive best:", ranking[0][1] - dict(ranking)[best])
