#include <pthread.h>
#include <stdio.h>
#include <stdlib.h>

#define THREADS 4

static pthread_mutex_t lock = PTHREAD_MUTEX_INITIALIZER;
static unsigned long total;
static long work = 3000;

static void *worker(void *arg) {
  unsigned long id = (unsigned long)arg;
  unsigned long local = id;
  for (long i = 0; i < work; i++) {
    local = local * 6364136223846793005UL + 1442695040888963407UL;
    if ((local >> 60) == id) local ^= (unsigned long)i;
  }
  pthread_mutex_lock(&lock);
  total += local >> 32;
  pthread_mutex_unlock(&lock);
  return NULL;
}

int main(int argc, char **argv) {
  if (argc > 1) work = atol(argv[1]);
  pthread_t t[THREADS];
  for (unsigned long i = 0; i < THREADS; i++)
    pthread_create(&t[i], NULL, worker, (void *)i);
  for (int i = 0; i < THREADS; i++)
    pthread_join(t[i], NULL);
  printf("%lu\n", total);
  return 0;
}
