# Mean-reverting diffusion: schedules, transition kernels, reverse steps
