# Infrastructure helpers: configuration, tensor files, checkpoints, devices, images
