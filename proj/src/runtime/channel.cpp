#include "dynens/runtime/channel.hpp"

#include <cerrno>
#include <cstring>

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace dynens {

namespace {

constexpr std::uint32_t kMaxFrame = 1u << 30;

void write_all(int fd, const std::uint8_t* p, std::size_t n) {
    while (n > 0) {
        ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
        if (w < 0) {
            if (errno == EINTR) continue;
            throw ChannelError(std::string("channel send: ") + std::strerror(errno));
        }
        p += w;
        n -= static_cast<std::size_t>(w);
    }
}

// False on end of stream before the first byte.
bool read_all(int fd, std::uint8_t* p, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
        ssize_t r = ::read(fd, p + got, n - got);
        if (r < 0) {
            if (errno == EINTR) continue;
            if (errno == ECONNRESET && got == 0) return false;
            throw ChannelError(std::string("channel recv: ") + std::strerror(errno));
        }
        if (r == 0) {
            if (got == 0) return false;
            throw ChannelError("channel closed mid-frame");
        }
        got += static_cast<std::size_t>(r);
    }
    return true;
}

}  // namespace

Channel& Channel::operator=(Channel&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
}

Channel::~Channel() { close(); }

void Channel::close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
}

void Channel::send(const Message& m) {
    if (fd_ < 0) throw ChannelError("send on closed channel");
    auto body = encode(m);
    std::uint32_t len = static_cast<std::uint32_t>(body.size());
    std::uint8_t hdr[4] = {std::uint8_t(len), std::uint8_t(len >> 8), std::uint8_t(len >> 16),
                           std::uint8_t(len >> 24)};
    write_all(fd_, hdr, 4);
    write_all(fd_, body.data(), body.size());
}

std::optional<Message> Channel::recv() {
    if (fd_ < 0) throw ChannelError("recv on closed channel");
    std::uint8_t hdr[4];
    if (!read_all(fd_, hdr, 4)) return std::nullopt;
    std::uint32_t len = hdr[0] | (hdr[1] << 8) | (hdr[2] << 16) | (std::uint32_t(hdr[3]) << 24);
    if (len > kMaxFrame) throw ChannelError("oversized frame");
    std::vector<std::uint8_t> body(len);
    if (len && !read_all(fd_, body.data(), len)) throw ChannelError("channel closed mid-frame");
    return decode(body);
}

bool Channel::readable(double timeout) const {
    if (fd_ < 0) return false;
    pollfd p{fd_, POLLIN, 0};
    int ms = timeout <= 0 ? 0 : static_cast<int>(timeout * 1000.0 + 0.999);
    int r;
    do {
        r = ::poll(&p, 1, ms);
    } while (r < 0 && errno == EINTR);
    return r > 0;
}

std::optional<Message> Channel::recv_for(double timeout) {
    if (!readable(timeout)) return std::nullopt;
    return recv();
}

std::pair<Channel, Channel> make_channel_pair() {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
        throw ChannelError(std::string("socketpair: ") + std::strerror(errno));
    int sz = 4 << 20;
    for (int fd : sv) {
        ::setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &sz, sizeof sz);
        ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &sz, sizeof sz);
    }
    return {Channel(sv[0]), Channel(sv[1])};
}

}  // namespace dynens
