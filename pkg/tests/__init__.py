# Tests package for hrpose
