"""Reference oracles shared by the binfactor test suite."""
