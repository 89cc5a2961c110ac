# backend package
