# Metrics, classical baselines and the comparison/ablation harness
