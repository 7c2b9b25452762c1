#pragma once

#include <functional>
#include <string>

#include <json.hpp>

#include "qallm/error.h"

namespace qallm {

class HttpError : public Error {
public:
    HttpError(const std::string& what, int status) : Error(what), status_(status) {}
    // 0 when the request never produced a response.
    int status() const { return status_; }
    bool retryable() const { return status_ == 0 || status_ == 429 || status_ >= 500; }

private:
    int status_;
};

// POSTs body to url ("http[s]://host[:port]/path") with an optional bearer
// token and returns the parsed JSON response. Non-2xx responses throw.
nlohmann::json post_json(const std::string& url, const nlohmann::json& body,
                         const std::string& bearer_token, int timeout_seconds);

// Calls f, retrying retryable HttpErrors with exponential backoff.
nlohmann::json with_retries(int max_retries, const std::function<nlohmann::json()>& f,
                            int base_delay_ms = 200);

}  // namespace qallm
