# Parallel-beam tomography: geometry, projector pair, FBP, phantoms
