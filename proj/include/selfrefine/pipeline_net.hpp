#pragma once

// HTTP transport for the external teacher / judge clients, kept in its own
// header so test binaries that fake the transport never pull in httplib.

#include <httplib.h>

#include "teacher.hpp"

namespace selfrefine::cli {

inline teacher::Transport default_transport() {
    return [](const teacher::ChatEndpoint& endpoint, const std::string& body,
              const std::string& api_key) -> teacher::HttpReply {
        httplib::Client client(endpoint.host, endpoint.port);
        client.set_connection_timeout(10, 0);
        client.set_read_timeout(120, 0);
        httplib::Headers headers;
        if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
        auto res = client.Post(endpoint.path, headers, body, "application/json");
        if (!res)
            return {0, "", "transport error: " + httplib::to_string(res.error())};
        return {res->status, res->body, ""};
    };
}

}  // namespace selfrefine::cli
