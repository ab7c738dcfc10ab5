# Makes the config directory a package 