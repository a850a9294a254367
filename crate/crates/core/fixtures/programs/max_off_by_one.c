/* Starts the running maximum at 0, so all-negative input goes wrong. */
#include <stdio.h>

int main(void) {
    int n, x, best = 0;
    scanf("%d", &n);
    for (int i = 0; i < n; i++) {
        scanf("%d", &x);
        if (x > best)
            best = x;
    }
    printf("%d\n", best);
    return 0;
}
