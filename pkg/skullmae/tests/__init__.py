# skullmae tests package
