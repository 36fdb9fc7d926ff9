long mix(long a, long b) {
  long r = a * 2654435761L ^ b;
  for (int i = 0; i < 8; i++)
    r = (r << 5) ^ (r >> 3) ^ i;
  return r;
}

long checksum(const long *v, long n) {
  long s = 0;
  for (long i = 0; i < n; i++)
    s = s * 31 + (v[i] & 0xffff);
  return s;
}
