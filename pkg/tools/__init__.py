# Experiment components: synthesis, transport distances, model, training, grid search, reports
