# Parameter store, dilated conv network, optimizer and losses
