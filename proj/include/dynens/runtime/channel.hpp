#pragma once

#include <optional>
#include <stdexcept>
#include <utility>

#include "dynens/runtime/messages.hpp"

namespace dynens {

class ChannelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One end of an ordered, reliable, message-framed stream socket.
/// Frames are a 4-byte little-endian length followed by a msgpack body.
class Channel {
public:
    Channel() = default;
    explicit Channel(int fd) : fd_(fd) {}
    Channel(Channel&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Channel& operator=(Channel&& o) noexcept;
    Channel(const Channel&) = delete;
    Channel& operator=(const Channel&) = delete;
    ~Channel();

    int fd() const noexcept { return fd_; }
    bool open() const noexcept { return fd_ >= 0; }
    void close();

    void send(const Message& m);
    /// Blocks; nullopt on orderly end of stream.
    std::optional<Message> recv();
    /// Waits at most `timeout` seconds for a frame to start arriving.
    std::optional<Message> recv_for(double timeout);
    /// True when a frame or end of stream can be read without waiting.
    bool readable(double timeout = 0.0) const;

private:
    int fd_ = -1;
};

/// A connected pair with enlarged socket buffers.
std::pair<Channel, Channel> make_channel_pair();

}  // namespace dynens
