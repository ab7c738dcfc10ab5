# Makes the utils directory a package 