/* Tries to open a TCP connection to a public address. */
#include <arpa/inet.h>
#include <stdio.h>
#include <sys/socket.h>
#include <unistd.h>

int main(void) {
    int s = socket(AF_INET, SOCK_STREAM, 0);
    if (s < 0) {
        puts("socket refused");
        return 0;
    }
    struct sockaddr_in addr = {0};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(80);
    inet_pton(AF_INET, "1.1.1.1", &addr.sin_addr);
    if (connect(s, (struct sockaddr *)&addr, sizeof addr) == 0)
        puts("connected");
    else
        perror("connect");
    close(s);
    return 0;
}
