/* Leaves a marker file and a long-lived process behind for the probe. */
#include <stdio.h>
#include <unistd.h>

int main(void) {
    FILE *f = fopen("isolation-marker.txt", "w");
    fputs("secret", f);
    fclose(f);
    printf("%d\n", (int)getpid());
    fflush(stdout);
    sleep(2);
    return 0;
}
