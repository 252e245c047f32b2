# Restoration pipeline: dataset, teacher, distillation, post-processing and stage orchestration
