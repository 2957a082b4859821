"""
Rehearsing a migration on a cloned guest
========================================

A word that merely looks like a pointer must never be rewritten.  Here a
few such words are planted in a data buffer, then the migration is
rehearsed on a clone twice: once with cross-link verification, once
with verification switched off.
"""

from kmig import GuestSpec, build_guest, dry_run_validate, plant_decoy
from kmig.memory import Region

state, image = build_guest(GuestSpec(num_files=200, num_processes=2, seed=4))
paths = state.paths[:50]
sources = [state.dentries[p] for p in paths]
decoys = [plant_decoy(state, image, s) for s in sources[:3]]
area = Region(0x400000, 128 * 1024)

careful = dry_run_validate(state, image, sources, area, paths)
print("with verification:", "pass" if careful.passed else "fail")

careless = dry_run_validate(state, image, sources, area, paths, verify=False)
print("without verification:", "pass" if careless.passed else "fail")
for line in careless.diagnostics:
    print("  ", line)
print("planted at", [hex(d) for d in decoys])

# the real guest never saw any of this
assert 0x400000 not in image.regions
